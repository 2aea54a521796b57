// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include "flowlens/flow.hpp"

#include <cmath>

#include <json.hpp>

#include "flowlens/container.hpp"

namespace flowlens {

namespace {

constexpr const char* kFlowMagic = "NFCKPT01";
constexpr int kFlowVersion = 1;

void fill_uniform(std::vector<float>& w, std::size_t n, int fan_in, float gain, Rng& rng) {
    w.resize(n);
    const float bound = gain / std::sqrt(static_cast<float>(fan_in));
    for (auto& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
}

}  // namespace

FlowModel make_flow(int dim, int n_layers, int hidden, std::uint64_t seed, bool randomize_heads) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("flow dim must be even and >= 2, got " + std::to_string(dim));
    if (n_layers < 1) throw std::invalid_argument("flow needs at least one layer");
    if (hidden < 1) throw std::invalid_argument("flow hidden width must be positive");
    FlowModel m;
    m.dim = dim;
    m.hidden = hidden;
    m.feat_mean.assign(static_cast<std::size_t>(dim), 0.0f);
    m.feat_std.assign(static_cast<std::size_t>(dim), 1.0f);
    const int half = dim / 2;
    Rng rng(mix_seed(seed, 0x666c6f77));
    m.layers.resize(static_cast<std::size_t>(n_layers));
    for (int i = 0; i < n_layers; ++i) {
        CouplingLayer& l = m.layers[static_cast<std::size_t>(i)];
        l.transform_first = (i % 2 == 0);
        fill_uniform(l.w1, static_cast<std::size_t>(hidden) * half, half, 1.0f, rng);
        fill_uniform(l.b1, static_cast<std::size_t>(hidden), half, 1.0f, rng);
        fill_uniform(l.w2, static_cast<std::size_t>(hidden) * hidden, hidden, 1.0f, rng);
        fill_uniform(l.b2, static_cast<std::size_t>(hidden), hidden, 1.0f, rng);
        if (randomize_heads) {
            fill_uniform(l.ws, static_cast<std::size_t>(half) * hidden, hidden, 0.3f, rng);
            fill_uniform(l.bs, static_cast<std::size_t>(half), hidden, 0.3f, rng);
            fill_uniform(l.wb, static_cast<std::size_t>(half) * hidden, hidden, 0.3f, rng);
            fill_uniform(l.bb, static_cast<std::size_t>(half), hidden, 0.3f, rng);
        } else {
            // Zero heads make every layer start as the identity map.
            l.ws.assign(static_cast<std::size_t>(half) * hidden, 0.0f);
            l.bs.assign(static_cast<std::size_t>(half), 0.0f);
            l.wb.assign(static_cast<std::size_t>(half) * hidden, 0.0f);
            l.bb.assign(static_cast<std::size_t>(half), 0.0f);
        }
    }
    return m;
}

std::vector<float> flow_sample(const FlowModel& m, Rng& rng) {
    std::vector<float> u(static_cast<std::size_t>(m.dim));
    for (auto& v : u) v = static_cast<float>(rng.normal());
    return flow_inverse<float>(m, u);
}

std::vector<std::uint8_t> save_flow_checkpoint(const FlowModel& m) {
    ContainerWriter w(kFlowMagic);
    nlohmann::json hdr;
    hdr["aborted"] = m.meta.aborted;
    hdr["curve"] = m.train_curve;
    hdr["dim"] = m.dim;
    hdr["epochs"] = m.meta.epochs;
    hdr["final_loss"] = m.meta.final_loss;
    hdr["hidden"] = m.hidden;
    hdr["layers"] = static_cast<int>(m.layers.size());
    hdr["seed"] = m.meta.seed;
    hdr["version"] = kFlowVersion;
    w.header() = hdr;
    w.add_f32(m.feat_mean);
    w.add_f32(m.feat_std);
    for (const auto& l : m.layers) {
        w.add_f32(l.w1);
        w.add_f32(l.b1);
        w.add_f32(l.w2);
        w.add_f32(l.b2);
        w.add_f32(l.ws);
        w.add_f32(l.bs);
        w.add_f32(l.wb);
        w.add_f32(l.bb);
    }
    return w.finish();
}

FlowModel load_flow_checkpoint(std::span<const std::uint8_t> bytes) {
    ContainerReader r(bytes, kFlowMagic);
    const auto& hdr = r.header();
    const int version = hdr.at("version").get<int>();
    if (version != kFlowVersion)
        throw std::runtime_error("unsupported flow checkpoint version " + std::to_string(version));
    FlowModel m;
    m.dim = hdr.at("dim").get<int>();
    m.hidden = hdr.at("hidden").get<int>();
    const int n_layers = hdr.at("layers").get<int>();
    if (m.dim < 2 || m.dim % 2 != 0 || m.hidden < 1 || n_layers < 1)
        throw std::runtime_error("flow checkpoint header has invalid dimensions");
    m.meta.epochs = hdr.at("epochs").get<int>();
    m.meta.final_loss = hdr.at("final_loss").get<float>();
    m.meta.seed = hdr.at("seed").get<std::uint64_t>();
    m.meta.aborted = hdr.at("aborted").get<bool>();
    m.train_curve = hdr.at("curve").get<std::vector<float>>();
    const int half = m.dim / 2;
    m.feat_mean = r.read_f32(static_cast<std::size_t>(m.dim));
    m.feat_std = r.read_f32(static_cast<std::size_t>(m.dim));
    m.layers.resize(static_cast<std::size_t>(n_layers));
    for (int i = 0; i < n_layers; ++i) {
        CouplingLayer& l = m.layers[static_cast<std::size_t>(i)];
        l.transform_first = (i % 2 == 0);
        l.w1 = r.read_f32(static_cast<std::size_t>(m.hidden) * half);
        l.b1 = r.read_f32(static_cast<std::size_t>(m.hidden));
        l.w2 = r.read_f32(static_cast<std::size_t>(m.hidden) * m.hidden);
        l.b2 = r.read_f32(static_cast<std::size_t>(m.hidden));
        l.ws = r.read_f32(static_cast<std::size_t>(half) * m.hidden);
        l.bs = r.read_f32(static_cast<std::size_t>(half));
        l.wb = r.read_f32(static_cast<std::size_t>(half) * m.hidden);
        l.bb = r.read_f32(static_cast<std::size_t>(half));
    }
    r.expect_end();
    return m;
}

void save_flow_checkpoint_file(const FlowModel& m, const std::string& path) {
    const auto bytes = save_flow_checkpoint(m);
    write_file_bytes(path, bytes);
}

FlowModel load_flow_checkpoint_file(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return load_flow_checkpoint(bytes);
}

}  // namespace flowlens
