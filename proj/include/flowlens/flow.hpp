// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Affine-coupling normalizing flow with a unit-Gaussian base. Each layer
// transforms one half of the vector with an elementwise affine map whose scale
// and shift are predicted from the other half; the log-determinant is the sum
// of the scale logits over the transformed half. Per-dimension feature
// standardization is folded in as an input affine stage, so log_density stays
// exactly log p_u(u) + logdet_total.

#ifndef FLOWLENS_FLOW_HPP
#define FLOWLENS_FLOW_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowlens/rng.hpp"
#include "flowlens/tape.hpp"
#include "flowlens/tensor.hpp"

namespace flowlens {

// Two shared ReLU linear layers feeding separate scale/shift heads.
// Weight matrices are row-major {rows, cols}.
struct CouplingLayer {
    bool transform_first = true;  // parity: even layers transform the first half
    std::vector<float> w1, b1;    // {hidden, half}, {hidden}
    std::vector<float> w2, b2;    // {hidden, hidden}, {hidden}
    std::vector<float> ws, bs;    // {half, hidden}, {half} -> scale logits
    std::vector<float> wb, bb;    // {half, hidden}, {half} -> shift
};

struct FlowTrainMeta {
    int epochs = 0;
    float final_loss = 0.0f;
    std::uint64_t seed = 0;
    bool aborted = false;
};

struct FlowModel {
    int dim = 0;
    int hidden = 64;
    std::vector<CouplingLayer> layers;
    // Per-dimension standardization, applied before the first coupling layer.
    std::vector<float> feat_mean, feat_std;
    FlowTrainMeta meta;
    std::vector<float> train_curve;  // mean NLL per epoch

    int half() const { return dim / 2; }
};

inline constexpr double kLog2Pi = 1.8378770664093453;

// Scale logits are squashed through 2*tanh(x/2) before exponentiation, so the
// affine scale stays in [e^-2, e^2].
template <typename T>
inline T clamp_scale_logit(T v) {
    return T(2) * std::tanh(v * T(0.5));
}

// ---------------------------------------------------------------------------
// Construction

// Identity-start initialization: trunk and shift head get uniform fan-in
// weights, the scale head's final layer starts at zero so every layer is the
// identity map. `randomize_heads` switches to fully random heads (test models
// need a non-trivial transform without training).
FlowModel make_flow(int dim, int n_layers, int hidden, std::uint64_t seed,
                    bool randomize_heads = false);

// ---------------------------------------------------------------------------
// Plain math (no tape). Templated so verification oracles can run in double.

namespace detail {

template <typename T>
void trunk_heads(const CouplingLayer& l, int half, int hidden, std::span<const T> passive,
                 std::span<T> scale_logits, std::span<T> shift) {
    std::vector<T> h1(static_cast<std::size_t>(hidden)), h2(static_cast<std::size_t>(hidden));
    for (int r = 0; r < hidden; ++r) {
        T acc = static_cast<T>(l.b1[static_cast<std::size_t>(r)]);
        const float* w = l.w1.data() + static_cast<std::size_t>(r) * half;
        for (int c = 0; c < half; ++c) acc += static_cast<T>(w[c]) * passive[static_cast<std::size_t>(c)];
        h1[static_cast<std::size_t>(r)] = acc > T(0) ? acc : T(0);
    }
    for (int r = 0; r < hidden; ++r) {
        T acc = static_cast<T>(l.b2[static_cast<std::size_t>(r)]);
        const float* w = l.w2.data() + static_cast<std::size_t>(r) * hidden;
        for (int c = 0; c < hidden; ++c) acc += static_cast<T>(w[c]) * h1[static_cast<std::size_t>(c)];
        h2[static_cast<std::size_t>(r)] = acc > T(0) ? acc : T(0);
    }
    for (int r = 0; r < half; ++r) {
        T acc_s = static_cast<T>(l.bs[static_cast<std::size_t>(r)]);
        T acc_b = static_cast<T>(l.bb[static_cast<std::size_t>(r)]);
        const float* wsr = l.ws.data() + static_cast<std::size_t>(r) * hidden;
        const float* wbr = l.wb.data() + static_cast<std::size_t>(r) * hidden;
        for (int c = 0; c < hidden; ++c) {
            acc_s += static_cast<T>(wsr[c]) * h2[static_cast<std::size_t>(c)];
            acc_b += static_cast<T>(wbr[c]) * h2[static_cast<std::size_t>(c)];
        }
        scale_logits[static_cast<std::size_t>(r)] = clamp_scale_logit(acc_s);
        shift[static_cast<std::size_t>(r)] = acc_b;
    }
}

}  // namespace detail

// y = [a*x1 + b | x2] with a = exp(scale logits); returns the layer log-det
// (sum of scale logits over the transformed half).
template <typename T>
T coupling_forward(const CouplingLayer& l, int dim, int hidden, std::span<const T> x,
                   std::span<T> y) {
    const int half = dim / 2;
    const int a0 = l.transform_first ? 0 : half;
    const int p0 = l.transform_first ? half : 0;
    std::vector<T> s(static_cast<std::size_t>(half)), t(static_cast<std::size_t>(half));
    detail::trunk_heads<T>(l, half, hidden, x.subspan(static_cast<std::size_t>(p0), static_cast<std::size_t>(half)), s, t);
    T logdet = T(0);
    for (int i = 0; i < half; ++i) {
        y[static_cast<std::size_t>(a0 + i)] =
            x[static_cast<std::size_t>(a0 + i)] * std::exp(s[static_cast<std::size_t>(i)]) + t[static_cast<std::size_t>(i)];
        y[static_cast<std::size_t>(p0 + i)] = x[static_cast<std::size_t>(p0 + i)];
        logdet += s[static_cast<std::size_t>(i)];
    }
    return logdet;
}

template <typename T>
void coupling_inverse(const CouplingLayer& l, int dim, int hidden, std::span<const T> y,
                      std::span<T> x) {
    const int half = dim / 2;
    const int a0 = l.transform_first ? 0 : half;
    const int p0 = l.transform_first ? half : 0;
    std::vector<T> s(static_cast<std::size_t>(half)), t(static_cast<std::size_t>(half));
    detail::trunk_heads<T>(l, half, hidden, y.subspan(static_cast<std::size_t>(p0), static_cast<std::size_t>(half)), s, t);
    for (int i = 0; i < half; ++i) {
        x[static_cast<std::size_t>(p0 + i)] = y[static_cast<std::size_t>(p0 + i)];
        x[static_cast<std::size_t>(a0 + i)] =
            (y[static_cast<std::size_t>(a0 + i)] - t[static_cast<std::size_t>(i)]) * std::exp(-s[static_cast<std::size_t>(i)]);
    }
}

struct FlowForwardResult {
    std::vector<double> u;
    double logdet_total = 0.0;
};

// u = layer_N(...layer_1(standardize(x))). logdet_total includes the
// standardization Jacobian -sum(log std).
template <typename T>
FlowForwardResult flow_forward(const FlowModel& m, std::span<const T> x) {
    if (static_cast<int>(x.size()) != m.dim)
        throw std::invalid_argument("flow_forward: input dim " + std::to_string(x.size()) +
                                    " != model dim " + std::to_string(m.dim));
    std::vector<T> cur(x.begin(), x.end()), next(static_cast<std::size_t>(m.dim));
    T logdet = T(0);
    for (int d = 0; d < m.dim; ++d) {
        const T sd = static_cast<T>(m.feat_std[static_cast<std::size_t>(d)]);
        cur[static_cast<std::size_t>(d)] = (cur[static_cast<std::size_t>(d)] - static_cast<T>(m.feat_mean[static_cast<std::size_t>(d)])) / sd;
        logdet -= std::log(sd);
    }
    for (const auto& l : m.layers) {
        logdet += coupling_forward<T>(l, m.dim, m.hidden, cur, next);
        std::swap(cur, next);
    }
    FlowForwardResult r;
    r.u.assign(cur.begin(), cur.end());
    r.logdet_total = static_cast<double>(logdet);
    return r;
}

template <typename T>
std::vector<T> flow_inverse(const FlowModel& m, std::span<const T> u) {
    if (static_cast<int>(u.size()) != m.dim)
        throw std::invalid_argument("flow_inverse: input dim mismatch");
    std::vector<T> cur(u.begin(), u.end()), next(static_cast<std::size_t>(m.dim));
    for (auto it = m.layers.rbegin(); it != m.layers.rend(); ++it) {
        coupling_inverse<T>(*it, m.dim, m.hidden, cur, next);
        std::swap(cur, next);
    }
    for (int d = 0; d < m.dim; ++d)
        cur[static_cast<std::size_t>(d)] = cur[static_cast<std::size_t>(d)] * static_cast<T>(m.feat_std[static_cast<std::size_t>(d)]) +
                                           static_cast<T>(m.feat_mean[static_cast<std::size_t>(d)]);
    return cur;
}

// log p(x) = log p_u(u) + logdet_total, with p_u the unit Gaussian.
template <typename T>
double log_density(const FlowModel& m, std::span<const T> x) {
    for (const T v : x)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument("log_density: non-finite input");
    auto fwd = flow_forward<T>(m, x);
    double ss = 0.0;
    for (double v : fwd.u) ss += v * v;
    return -0.5 * ss - 0.5 * m.dim * kLog2Pi + fwd.logdet_total;
}

// Test utility: draw x ~ model by transforming a base sample through the
// inverse flow.
std::vector<float> flow_sample(const FlowModel& m, Rng& rng);

// ---------------------------------------------------------------------------
// Tape graph: the same density as log_density, recorded through the autodiff
// tape so it can be differentiated (to features, and through a feature
// extractor graph to pixels).

struct FlowLayerNodes {
    NodeId w1 = -1, b1 = -1, w2 = -1, b2 = -1, ws = -1, bs = -1, wb = -1, bb = -1;
};

struct FlowGraph {
    NodeId input = -1;  // raw feature node the graph was built on
    NodeId logp = -1;   // scalar log density
    std::vector<FlowLayerNodes> layer_nodes;
};

template <typename T>
FlowGraph build_flow_logp(Tape<T>& tape, const FlowModel& m, NodeId x_node) {
    if (tape.value(x_node).shape != Shape{m.dim})
        throw std::invalid_argument("build_flow_logp: feature node shape " +
                                    tape.value(x_node).shape.str() + " != model dim");
    const int D = m.dim, half = m.half();
    double std_logdet = 0.0;
    Tensor<T> neg_mean(Shape{D}), inv_std(Shape{D});
    for (int d = 0; d < D; ++d) {
        neg_mean.data[static_cast<std::size_t>(d)] = static_cast<T>(-m.feat_mean[static_cast<std::size_t>(d)]);
        inv_std.data[static_cast<std::size_t>(d)] = T(1) / static_cast<T>(m.feat_std[static_cast<std::size_t>(d)]);
        std_logdet -= std::log(static_cast<double>(m.feat_std[static_cast<std::size_t>(d)]));
    }
    NodeId z = tape.mul(tape.add(x_node, tape.leaf(std::move(neg_mean))), tape.leaf(std::move(inv_std)));

    const Tensor<T> twos = Tensor<T>::full(Shape{half}, T(2));
    const Tensor<T> halves = Tensor<T>::full(Shape{half}, T(0.5));
    FlowGraph graph;
    graph.input = x_node;
    NodeId logdet_sum = -1;
    for (const auto& l : m.layers) {
        const int a0 = l.transform_first ? 0 : half;
        const int p0 = l.transform_first ? half : 0;
        NodeId xa = tape.slice(z, a0, a0 + half);
        NodeId xp = tape.slice(z, p0, p0 + half);
        auto mat = [&](const std::vector<float>& w, int rows, int cols) {
            Tensor<T> t(Shape{rows, cols});
            for (std::size_t i = 0; i < w.size(); ++i) t.data[i] = static_cast<T>(w[i]);
            return tape.leaf(std::move(t));
        };
        auto vec = [&](const std::vector<float>& v) {
            Tensor<T> t(Shape{static_cast<int>(v.size())});
            for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<T>(v[i]);
            return tape.leaf(std::move(t));
        };
        FlowLayerNodes ids;
        ids.w1 = mat(l.w1, m.hidden, half);
        ids.b1 = vec(l.b1);
        ids.w2 = mat(l.w2, m.hidden, m.hidden);
        ids.b2 = vec(l.b2);
        ids.ws = mat(l.ws, half, m.hidden);
        ids.bs = vec(l.bs);
        ids.wb = mat(l.wb, half, m.hidden);
        ids.bb = vec(l.bb);
        graph.layer_nodes.push_back(ids);
        NodeId h1 = tape.relu(tape.add(tape.matvec(ids.w1, xp), ids.b1));
        NodeId h2 = tape.relu(tape.add(tape.matvec(ids.w2, h1), ids.b2));
        NodeId r = tape.add(tape.matvec(ids.ws, h2), ids.bs);
        NodeId s = tape.mul(tape.leaf(twos), tape.tanh(tape.mul(tape.leaf(halves), r)));
        NodeId t = tape.add(tape.matvec(ids.wb, h2), ids.bb);
        NodeId ya = tape.add(tape.mul(xa, tape.exp(s)), t);
        z = l.transform_first ? tape.concat(ya, xp) : tape.concat(xp, ya);
        NodeId ld = tape.sum(s);
        logdet_sum = (logdet_sum < 0) ? ld : tape.add(logdet_sum, ld);
    }
    NodeId ss = tape.sum(tape.mul(z, z));
    NodeId neg_half = tape.leaf(Tensor<T>::scalar(T(-0.5)));
    NodeId base = tape.add(tape.mul(neg_half, ss),
                           tape.leaf(Tensor<T>::scalar(static_cast<T>(-0.5 * D * kLog2Pi + std_logdet))));
    graph.logp = tape.add(base, logdet_sum);
    return graph;
}

// ---------------------------------------------------------------------------
// Training

struct FlowTrainConfig {
    int epochs = 200;
    float lr = 1e-4f;
    int batch_size = 128;
    std::uint64_t seed = 0;
    int n_layers = 10;
    int hidden = 64;
    bool standardize = true;
};

// Row-major sample matrix {count, dim}.
struct FeatureSet {
    int count = 0;
    int dim = 0;
    std::vector<float> data;

    std::span<const float> row(int i) const {
        return std::span<const float>(data.data() + static_cast<std::size_t>(i) * dim,
                                      static_cast<std::size_t>(dim));
    }
};

// Maximum-likelihood training with Adam at a constant learning rate. On a
// non-finite epoch loss the last good epoch's weights are restored and
// meta.aborted is set. Single-threaded; fixed seed gives bit-identical models.
// With warm_start the given model's weights (and, unless config.standardize
// recomputes them, its standardization) are the starting point and
// config.n_layers/hidden are ignored.
FlowModel train_flow(const FeatureSet& dataset, const FlowTrainConfig& config,
                     const FlowModel* warm_start = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints: magic "NFCKPT01", u32 LE header length, UTF-8 JSON header,
// then little-endian f32 weight arrays in layer order.

std::vector<std::uint8_t> save_flow_checkpoint(const FlowModel& m);
FlowModel load_flow_checkpoint(std::span<const std::uint8_t> bytes);
void save_flow_checkpoint_file(const FlowModel& m, const std::string& path);
FlowModel load_flow_checkpoint_file(const std::string& path);

}  // namespace flowlens

#endif
