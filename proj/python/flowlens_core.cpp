// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "flowlens/flow.hpp"

namespace py = pybind11;
using namespace flowlens;

PYBIND11_MODULE(_core, m) {
    m.doc() = "flow-based density estimation with pixel-level scoring and camera adaptation";
    m.attr("__version__") = FLOWLENS_VERSION;
}
