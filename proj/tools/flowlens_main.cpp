// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

int main(int argc, char** argv) {
    CLI::App app{"flowlens: flow-based density estimation and camera adaptation"};
    app.require_subcommand(1);
    CLI11_PARSE(app, argc, argv);
    return 0;
}
