// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Batched flow trainer. The per-sample math matches the tape graph from
// build_flow_logp (tests enforce this); training uses hand-written batched
// matrix kernels instead of the tape so the epoch loop stays fast on one core.

#include <cmath>
#include <cstdio>
#include <numeric>

#include "flowlens/flow.hpp"

namespace flowlens {

namespace {

// C{rows,n} = A{rows,k} * W{n,k}^T, then += bias per row.
void linear_forward(const float* a, int rows, int k, const float* w, const float* bias, int n,
                    float* c) {
    for (int r = 0; r < rows; ++r) {
        const float* ar = a + static_cast<std::size_t>(r) * k;
        float* cr = c + static_cast<std::size_t>(r) * n;
        for (int j = 0; j < n; ++j) {
            const float* wj = w + static_cast<std::size_t>(j) * k;
            float acc = bias[j];
            for (int i = 0; i < k; ++i) acc += ar[i] * wj[i];
            cr[j] = acc;
        }
    }
}

// C{rows,n} = G{rows,k} * W{k,n} (row-major W, i.e. grad through a {k,n}^T map).
void input_grad(const float* g, int rows, int k, const float* w, int n, float* c,
                bool accumulate) {
    for (int r = 0; r < rows; ++r) {
        const float* gr = g + static_cast<std::size_t>(r) * k;
        float* cr = c + static_cast<std::size_t>(r) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) cr[j] = 0.0f;
        for (int i = 0; i < k; ++i) {
            const float gv = gr[i];
            if (gv == 0.0f) continue;
            const float* wi = w + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) cr[j] += gv * wi[j];
        }
    }
}

// GW{n,k} += G{rows,n}^T * A{rows,k}; GB{n} += column sums of G.
void weight_grad(const float* g, const float* a, int rows, int n, int k, float* gw, float* gb) {
    for (int r = 0; r < rows; ++r) {
        const float* gr = g + static_cast<std::size_t>(r) * n;
        const float* ar = a + static_cast<std::size_t>(r) * k;
        for (int j = 0; j < n; ++j) {
            const float gv = gr[j];
            gb[j] += gv;
            if (gv == 0.0f) continue;
            float* gwj = gw + static_cast<std::size_t>(j) * k;
            for (int i = 0; i < k; ++i) gwj[i] += gv * ar[i];
        }
    }
}

struct LayerCache {
    std::vector<float> xa, xp;  // {B, half}
    std::vector<float> h1, h2;  // {B, hidden}
    std::vector<float> s, e;    // {B, half}
};

struct LayerGrads {
    std::vector<float> w1, b1, w2, b2, ws, bs, wb, bb;

    void match(const CouplingLayer& l) {
        w1.assign(l.w1.size(), 0.0f);
        b1.assign(l.b1.size(), 0.0f);
        w2.assign(l.w2.size(), 0.0f);
        b2.assign(l.b2.size(), 0.0f);
        ws.assign(l.ws.size(), 0.0f);
        bs.assign(l.bs.size(), 0.0f);
        wb.assign(l.wb.size(), 0.0f);
        bb.assign(l.bb.size(), 0.0f);
    }
};

template <typename F>
void zip_params(FlowModel& m, std::vector<LayerGrads>& g, F&& f) {
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        CouplingLayer& l = m.layers[i];
        LayerGrads& lg = g[i];
        f(l.w1, lg.w1);
        f(l.b1, lg.b1);
        f(l.w2, lg.w2);
        f(l.b2, lg.b2);
        f(l.ws, lg.ws);
        f(l.bs, lg.bs);
        f(l.wb, lg.wb);
        f(l.bb, lg.bb);
    }
}

struct Adam {
    std::vector<std::vector<float>> m, v;
    long t = 0;
    float lr, beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;

    explicit Adam(float learning_rate) : lr(learning_rate) {}

    void step(FlowModel& model, std::vector<LayerGrads>& grads) {
        ++t;
        const float c1 = 1.0f - std::pow(beta1, static_cast<float>(t));
        const float c2 = 1.0f - std::pow(beta2, static_cast<float>(t));
        std::size_t slot = 0;
        zip_params(model, grads, [&](std::vector<float>& w, std::vector<float>& g) {
            if (slot >= m.size()) {
                m.emplace_back(w.size(), 0.0f);
                v.emplace_back(w.size(), 0.0f);
            }
            auto& ms = m[slot];
            auto& vs = v[slot];
            for (std::size_t i = 0; i < w.size(); ++i) {
                ms[i] = beta1 * ms[i] + (1.0f - beta1) * g[i];
                vs[i] = beta2 * vs[i] + (1.0f - beta2) * g[i] * g[i];
                w[i] -= lr * (ms[i] / c1) / (std::sqrt(vs[i] / c2) + eps);
            }
            ++slot;
        });
    }
};

void split_cols(const std::vector<float>& x, int rows, int dim, int a0, int half, float* active,
                float* passive) {
    const int p0 = (a0 == 0) ? half : 0;
    for (int r = 0; r < rows; ++r) {
        const float* xr = x.data() + static_cast<std::size_t>(r) * dim;
        for (int i = 0; i < half; ++i) {
            active[static_cast<std::size_t>(r) * half + i] = xr[a0 + i];
            passive[static_cast<std::size_t>(r) * half + i] = xr[p0 + i];
        }
    }
}

void join_cols(std::vector<float>& x, int rows, int dim, int a0, int half, const float* active,
               const float* passive) {
    const int p0 = (a0 == 0) ? half : 0;
    for (int r = 0; r < rows; ++r) {
        float* xr = x.data() + static_cast<std::size_t>(r) * dim;
        for (int i = 0; i < half; ++i) {
            xr[a0 + i] = active[static_cast<std::size_t>(r) * half + i];
            xr[p0 + i] = passive[static_cast<std::size_t>(r) * half + i];
        }
    }
}

}  // namespace

FlowModel train_flow(const FeatureSet& dataset, const FlowTrainConfig& config,
                     const FlowModel* warm_start) {
    if (dataset.count < 1) throw std::invalid_argument("train_flow: empty dataset");
    if (dataset.dim < 2 || dataset.dim % 2 != 0)
        throw std::invalid_argument("train_flow: feature dim must be even and >= 2");
    if (static_cast<std::size_t>(dataset.count) * dataset.dim != dataset.data.size())
        throw std::invalid_argument("train_flow: dataset size does not match count*dim");
    if (config.batch_size < 1) throw std::invalid_argument("train_flow: batch_size must be >= 1");
    if (config.epochs < 0) throw std::invalid_argument("train_flow: epochs must be >= 0");
    if (warm_start && warm_start->dim != dataset.dim)
        throw std::invalid_argument("train_flow: warm start dim does not match dataset");

    const int N = dataset.count, D = dataset.dim, half = D / 2;
    FlowModel model = warm_start ? *warm_start : make_flow(D, config.n_layers, config.hidden, config.seed);
    const int hidden = model.hidden;
    model.meta.seed = config.seed;

    double std_logdet = 0.0;
    if (config.standardize) {
        for (int d = 0; d < D; ++d) {
            double mean = 0.0;
            for (int i = 0; i < N; ++i) mean += dataset.data[static_cast<std::size_t>(i) * D + d];
            mean /= N;
            double var = 0.0;
            for (int i = 0; i < N; ++i) {
                const double diff = dataset.data[static_cast<std::size_t>(i) * D + d] - mean;
                var += diff * diff;
            }
            var /= N;
            model.feat_mean[static_cast<std::size_t>(d)] = static_cast<float>(mean);
            model.feat_std[static_cast<std::size_t>(d)] =
                std::max(static_cast<float>(std::sqrt(var)), 1e-6f);
        }
    }
    for (int d = 0; d < D; ++d) std_logdet += std::log(static_cast<double>(model.feat_std[static_cast<std::size_t>(d)]));

    // Standardized copy of the data; the flow layers train in this space.
    std::vector<float> z(dataset.data.size());
    for (int i = 0; i < N; ++i)
        for (int d = 0; d < D; ++d)
            z[static_cast<std::size_t>(i) * D + d] =
                (dataset.data[static_cast<std::size_t>(i) * D + d] - model.feat_mean[static_cast<std::size_t>(d)]) /
                model.feat_std[static_cast<std::size_t>(d)];

    const int L = static_cast<int>(model.layers.size());
    const int B = std::min(config.batch_size, N);
    std::vector<LayerGrads> grads(static_cast<std::size_t>(L));
    std::vector<LayerCache> caches(static_cast<std::size_t>(L));
    for (auto& c : caches) {
        c.xa.resize(static_cast<std::size_t>(B) * half);
        c.xp.resize(static_cast<std::size_t>(B) * half);
        c.h1.resize(static_cast<std::size_t>(B) * hidden);
        c.h2.resize(static_cast<std::size_t>(B) * hidden);
        c.s.resize(static_cast<std::size_t>(B) * half);
        c.e.resize(static_cast<std::size_t>(B) * half);
    }
    std::vector<float> cur(static_cast<std::size_t>(B) * D), logdet_row(static_cast<std::size_t>(B));
    std::vector<float> buf_r(static_cast<std::size_t>(B) * half), buf_t(static_cast<std::size_t>(B) * half);
    std::vector<float> g_active(static_cast<std::size_t>(B) * half), g_passive(static_cast<std::size_t>(B) * half);
    std::vector<float> g_s(static_cast<std::size_t>(B) * half), g_r(static_cast<std::size_t>(B) * half);
    std::vector<float> g_h2(static_cast<std::size_t>(B) * hidden), g_h1(static_cast<std::size_t>(B) * hidden);

    Adam adam(config.lr);
    Rng rng(mix_seed(config.seed, 0x74726e));
    std::vector<int> perm(static_cast<std::size_t>(N));
    std::iota(perm.begin(), perm.end(), 0);

    std::vector<CouplingLayer> snapshot = model.layers;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(perm);
        double epoch_nll = 0.0;
        for (int start = 0; start < N; start += B) {
            const int rows = std::min(B, N - start);
            for (int r = 0; r < rows; ++r)
                std::copy_n(z.data() + static_cast<std::size_t>(perm[static_cast<std::size_t>(start + r)]) * D, D,
                            cur.data() + static_cast<std::size_t>(r) * D);
            std::fill(logdet_row.begin(), logdet_row.begin() + rows, 0.0f);

            for (int li = 0; li < L; ++li) {
                const CouplingLayer& l = model.layers[static_cast<std::size_t>(li)];
                LayerCache& c = caches[static_cast<std::size_t>(li)];
                const int a0 = l.transform_first ? 0 : half;
                split_cols(cur, rows, D, a0, half, c.xa.data(), c.xp.data());
                linear_forward(c.xp.data(), rows, half, l.w1.data(), l.b1.data(), hidden, c.h1.data());
                for (int i = 0; i < rows * hidden; ++i)
                    if (c.h1[static_cast<std::size_t>(i)] < 0.0f) c.h1[static_cast<std::size_t>(i)] = 0.0f;
                linear_forward(c.h1.data(), rows, hidden, l.w2.data(), l.b2.data(), hidden, c.h2.data());
                for (int i = 0; i < rows * hidden; ++i)
                    if (c.h2[static_cast<std::size_t>(i)] < 0.0f) c.h2[static_cast<std::size_t>(i)] = 0.0f;
                linear_forward(c.h2.data(), rows, hidden, l.ws.data(), l.bs.data(), half, buf_r.data());
                linear_forward(c.h2.data(), rows, hidden, l.wb.data(), l.bb.data(), half, buf_t.data());
                // buf_t turns from the shift head output into ya in place.
                for (int r = 0; r < rows; ++r) {
                    float ld = 0.0f;
                    for (int i = 0; i < half; ++i) {
                        const std::size_t idx = static_cast<std::size_t>(r) * half + i;
                        const float s = clamp_scale_logit(buf_r[idx]);
                        c.s[idx] = s;
                        c.e[idx] = std::exp(s);
                        ld += s;
                        buf_t[idx] = c.xa[idx] * c.e[idx] + buf_t[idx];
                    }
                    logdet_row[static_cast<std::size_t>(r)] += ld;
                }
                join_cols(cur, rows, D, a0, half, buf_t.data(), c.xp.data());
            }

            double batch_nll = 0.0;
            for (int r = 0; r < rows; ++r) {
                double ss = 0.0;
                const float* ur = cur.data() + static_cast<std::size_t>(r) * D;
                for (int d = 0; d < D; ++d) ss += static_cast<double>(ur[d]) * ur[d];
                batch_nll += 0.5 * ss + 0.5 * D * kLog2Pi - logdet_row[static_cast<std::size_t>(r)];
            }
            batch_nll /= rows;
            epoch_nll += batch_nll * rows;

            const float inv_rows = 1.0f / static_cast<float>(rows);
            for (std::size_t i = 0; i < grads.size(); ++i) grads[i].match(model.layers[i]);
            std::vector<float>& g_cur = cur;  // reuse: overwrite u with du in place
            for (int r = 0; r < rows; ++r) {
                float* ur = g_cur.data() + static_cast<std::size_t>(r) * D;
                for (int d = 0; d < D; ++d) ur[d] *= inv_rows;
            }
            for (int li = L - 1; li >= 0; --li) {
                const CouplingLayer& l = model.layers[static_cast<std::size_t>(li)];
                LayerCache& c = caches[static_cast<std::size_t>(li)];
                LayerGrads& g = grads[static_cast<std::size_t>(li)];
                const int a0 = l.transform_first ? 0 : half;
                split_cols(g_cur, rows, D, a0, half, g_active.data(), g_passive.data());
                // The shift grad equals the raw active-column grad; keep a copy in
                // buf_t before g_active is rewritten to the xa grad.
                std::copy(g_active.begin(), g_active.begin() + static_cast<std::size_t>(rows) * half,
                          buf_t.begin());
                for (int i = 0; i < rows * half; ++i) {
                    const std::size_t idx = static_cast<std::size_t>(i);
                    const float gya = g_active[idx];
                    g_s[idx] = gya * c.xa[idx] * c.e[idx] - inv_rows;
                    g_active[idx] = gya * c.e[idx];
                    const float sh = c.s[idx] * 0.5f;
                    g_r[idx] = g_s[idx] * (1.0f - sh * sh);
                }
                weight_grad(g_r.data(), c.h2.data(), rows, half, hidden, g.ws.data(), g.bs.data());
                weight_grad(buf_t.data(), c.h2.data(), rows, half, hidden, g.wb.data(), g.bb.data());
                input_grad(g_r.data(), rows, half, l.ws.data(), hidden, g_h2.data(), false);
                input_grad(buf_t.data(), rows, half, l.wb.data(), hidden, g_h2.data(), true);
                for (int i = 0; i < rows * hidden; ++i)
                    if (c.h2[static_cast<std::size_t>(i)] <= 0.0f) g_h2[static_cast<std::size_t>(i)] = 0.0f;
                weight_grad(g_h2.data(), c.h1.data(), rows, hidden, hidden, g.w2.data(), g.b2.data());
                input_grad(g_h2.data(), rows, hidden, l.w2.data(), hidden, g_h1.data(), false);
                for (int i = 0; i < rows * hidden; ++i)
                    if (c.h1[static_cast<std::size_t>(i)] <= 0.0f) g_h1[static_cast<std::size_t>(i)] = 0.0f;
                weight_grad(g_h1.data(), c.xp.data(), rows, hidden, half, g.w1.data(), g.b1.data());
                input_grad(g_h1.data(), rows, hidden, l.w1.data(), half, g_passive.data(), true);
                join_cols(g_cur, rows, D, a0, half, g_active.data(), g_passive.data());
            }
            adam.step(model, grads);
        }
        epoch_nll = epoch_nll / N + std_logdet;
        if (!std::isfinite(epoch_nll)) {
            std::fprintf(stderr,
                         "train_flow: non-finite loss at epoch %d, keeping weights from epoch %d\n",
                         epoch + 1, epoch);
            model.layers = snapshot;
            model.meta.aborted = true;
            break;
        }
        model.train_curve.push_back(static_cast<float>(epoch_nll));
        model.meta.epochs = epoch + 1;
        model.meta.final_loss = static_cast<float>(epoch_nll);
        snapshot = model.layers;
    }
    return model;
}

}  // namespace flowlens
