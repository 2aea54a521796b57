// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <doctest.h>

#include "flowlens/container.hpp"
#include "flowlens/flow.hpp"

using namespace flowlens;

namespace {

// A coupling layer whose heads are constant: scale logit `s` (post-clamp) and
// shift `t` on every transformed coordinate.
CouplingLayer constant_layer(int dim, int hidden, bool first, double s, double t) {
    const int half = dim / 2;
    CouplingLayer l;
    l.transform_first = first;
    l.w1.assign(static_cast<std::size_t>(hidden) * half, 0.0f);
    l.b1.assign(static_cast<std::size_t>(hidden), 0.0f);
    l.w2.assign(static_cast<std::size_t>(hidden) * hidden, 0.0f);
    l.b2.assign(static_cast<std::size_t>(hidden), 0.0f);
    l.ws.assign(static_cast<std::size_t>(half) * hidden, 0.0f);
    l.bs.assign(static_cast<std::size_t>(half), static_cast<float>(2.0 * std::atanh(s / 2.0)));
    l.wb.assign(static_cast<std::size_t>(half) * hidden, 0.0f);
    l.bb.assign(static_cast<std::size_t>(half), static_cast<float>(t));
    return l;
}

double logabsdet(std::vector<std::vector<double>> a) {
    const std::size_t n = a.size();
    double out = 0.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        std::swap(a[col], a[piv]);
        out += std::log(std::abs(a[col][col]));
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
        }
    }
    return out;
}

FeatureSet gaussian_mixture_2d(int n, std::uint64_t seed) {
    FeatureSet ds;
    ds.count = n;
    ds.dim = 2;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        const double cx = rng.uniform() < 0.5 ? -2.0 : 2.0;
        const double cy = cx < 0 ? 0.0 : 1.0;
        ds.data.push_back(static_cast<float>(cx + 0.6 * rng.normal()));
        ds.data.push_back(static_cast<float>(cy + 0.6 * rng.normal()));
    }
    return ds;
}

}  // namespace

TEST_CASE("coupling layer applies scale and shift to one half") {
    const auto l = constant_layer(2, 4, true, 0.5, 1.0);
    std::vector<double> x{2.0, 3.0}, y(2);
    const double logdet = coupling_forward<double>(l, 2, 4, x, y);
    CHECK(y[0] == doctest::Approx(2.0 * std::exp(0.5) + 1.0).epsilon(1e-6));  // 4.29744
    CHECK(y[1] == doctest::Approx(3.0));
    CHECK(logdet == doctest::Approx(0.5).epsilon(1e-6));

    std::vector<double> back(2);
    coupling_inverse<double>(l, 2, 4, y, back);
    CHECK(back[0] == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(back[1] == doctest::Approx(3.0));
}

TEST_CASE("model logdet is the sum of per-layer logdets") {
    FlowModel m = make_flow(2, 1, 4, 0);
    m.layers.clear();
    m.layers.push_back(constant_layer(2, 4, true, 0.5, 1.0));
    m.layers.push_back(constant_layer(2, 4, false, 0.3, -2.0));
    const std::vector<double> x{2.0, 3.0};
    const auto fwd = flow_forward<double>(m, x);
    CHECK(fwd.logdet_total == doctest::Approx(0.8).epsilon(1e-6));
    CHECK(fwd.u[0] == doctest::Approx(2.0 * std::exp(0.5) + 1.0).epsilon(1e-6));
    CHECK(fwd.u[1] == doctest::Approx(3.0 * std::exp(0.3) - 2.0).epsilon(1e-6));
}

TEST_CASE("identity-start flow is the standard normal") {
    const FlowModel m = make_flow(2, 10, 64, 42);
    const std::vector<double> origin{0.0, 0.0};
    CHECK(log_density<double>(m, origin) == doctest::Approx(-kLog2Pi).epsilon(1e-9));
    const std::vector<double> p{3.0, 4.0};
    CHECK(log_density<double>(m, p) == doctest::Approx(-kLog2Pi - 12.5).epsilon(1e-9));
}

TEST_CASE("layer parity alternates starting with the first half") {
    const FlowModel m = make_flow(8, 5, 16, 1);
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        CHECK(m.layers[i].transform_first == (i % 2 == 0));
}

TEST_CASE("inverse undoes forward") {
    FlowModel m = make_flow(8, 10, 32, 7, true);
    m.feat_mean.assign(8, 0.25f);
    m.feat_std.assign(8, 1.5f);
    Rng rng(3);

    double worst64 = 0.0, worst32 = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> x(8);
        for (auto& v : x) v = rng.uniform(-3.0, 3.0);
        const auto fwd = flow_forward<double>(m, x);
        const auto back = flow_inverse<double>(m, fwd.u);
        for (int d = 0; d < 8; ++d) worst64 = std::max(worst64, std::abs(back[d] - x[d]));

        std::vector<float> xf(x.begin(), x.end());
        const auto fwdf = flow_forward<float>(m, std::span<const float>(xf));
        std::vector<float> uf(fwdf.u.begin(), fwdf.u.end());
        const auto backf = flow_inverse<float>(m, std::span<const float>(uf));
        for (int d = 0; d < 8; ++d)
            worst32 = std::max(worst32, std::abs(static_cast<double>(backf[d]) - x[d]));
    }
    CHECK(worst64 < 1e-9);
    CHECK(worst32 < 1e-3);
}

TEST_CASE("logdet matches a numeric Jacobian determinant") {
    FlowModel m = make_flow(6, 4, 16, 11, true);
    m.feat_mean.assign(6, 0.1f);
    m.feat_std.assign(6, 2.0f);
    std::vector<double> x{0.3, -1.2, 0.8, 0.05, -0.6, 1.4};

    const double h = 1e-6;
    std::vector<std::vector<double>> jac(6, std::vector<double>(6));
    for (int d = 0; d < 6; ++d) {
        auto xp = x, xm = x;
        xp[static_cast<std::size_t>(d)] += h;
        xm[static_cast<std::size_t>(d)] -= h;
        const auto up = flow_forward<double>(m, xp).u;
        const auto um = flow_forward<double>(m, xm).u;
        for (int r = 0; r < 6; ++r)
            jac[static_cast<std::size_t>(r)][static_cast<std::size_t>(d)] =
                (up[static_cast<std::size_t>(r)] - um[static_cast<std::size_t>(r)]) / (2.0 * h);
    }
    const auto fwd = flow_forward<double>(m, x);
    CHECK(fwd.logdet_total == doctest::Approx(logabsdet(jac)).epsilon(1e-5));
}

TEST_CASE("tape log density matches the plain path and its input gradient checks out") {
    FlowModel m = make_flow(6, 4, 16, 19, true);
    m.feat_mean.assign(6, -0.2f);
    m.feat_std.assign(6, 1.3f);
    const std::vector<double> x{0.4, -0.9, 1.1, 0.2, -1.5, 0.7};

    Tape<double> tape;
    NodeId in = tape.leaf(Tensor<double>(Shape{6}, std::vector<double>(x)));
    const auto graph = build_flow_logp(tape, m, in);
    CHECK(tape.value(graph.logp).data[0] == doctest::Approx(log_density<double>(m, x)).epsilon(1e-12));

    const double err = finite_diff_check<double>(
        [&](Tape<double>& t, NodeId probe) { return build_flow_logp(t, m, probe).logp; },
        Tensor<double>(Shape{6}, std::vector<double>(x)), 1e-5);
    CHECK(err < 1e-6);

    Tape<float> tf;
    std::vector<float> xf(x.begin(), x.end());
    NodeId inf = tf.leaf(Tensor<float>(Shape{6}, std::move(xf)));
    const auto graphf = build_flow_logp(tf, m, inf);
    CHECK(static_cast<double>(tf.value(graphf.logp).data[0]) ==
          doctest::Approx(log_density<double>(m, x)).epsilon(1e-4));
}

TEST_CASE("first epoch loss equals the mean NLL of the initial model") {
    FeatureSet ds = gaussian_mixture_2d(64, 5);
    FlowTrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 64;  // single batch, so the recorded loss predates any update
    cfg.n_layers = 4;
    cfg.hidden = 16;
    cfg.seed = 9;
    const FlowModel trained = train_flow(ds, cfg);

    FlowModel init = make_flow(2, 4, 16, 9);
    init.feat_mean = trained.feat_mean;
    init.feat_std = trained.feat_std;
    double nll = 0.0;
    for (int i = 0; i < ds.count; ++i) {
        const auto row = ds.row(i);
        nll -= log_density<float>(init, row);
    }
    nll /= ds.count;
    REQUIRE(trained.train_curve.size() == 1);
    CHECK(trained.train_curve[0] == doctest::Approx(nll).epsilon(1e-4));
}

TEST_CASE("one optimizer step moves every parameter against its gradient") {
    FlowModel init = make_flow(6, 3, 8, 21, true);
    FeatureSet ds;
    ds.count = 4;
    ds.dim = 6;
    Rng rng(13);
    for (int i = 0; i < 24; ++i) ds.data.push_back(static_cast<float>(rng.uniform(-2.0, 2.0)));

    FlowTrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.lr = 1e-3f;
    cfg.standardize = false;
    cfg.seed = 2;
    const FlowModel after = train_flow(ds, cfg, &init);

    // Tape reference: NLL = -(1/N) sum logp, so parameter grads are the
    // negated mean of per-sample tape grads.
    std::vector<double> ref_grad;
    for (int i = 0; i < ds.count; ++i) {
        Tape<double> tape;
        const auto row = ds.row(i);
        Tensor<double> x(Shape{6});
        for (int d = 0; d < 6; ++d) x.data[static_cast<std::size_t>(d)] = row[static_cast<std::size_t>(d)];
        const auto graph = build_flow_logp(tape, init, tape.leaf(std::move(x)));
        const auto grads = tape.backward(graph.logp);
        std::size_t j = 0;
        for (const auto& ln : graph.layer_nodes)
            for (NodeId id : {ln.w1, ln.b1, ln.w2, ln.b2, ln.ws, ln.bs, ln.wb, ln.bb})
                for (const double g : grads[static_cast<std::size_t>(id)].data) {
                    if (j >= ref_grad.size()) ref_grad.resize(j + 1, 0.0);
                    ref_grad[j++] += -g / ds.count;
                }
    }

    std::vector<float> before_flat, after_flat;
    auto flatten = [](const FlowModel& m, std::vector<float>& out) {
        for (const auto& l : m.layers)
            for (const auto* arr : {&l.w1, &l.b1, &l.w2, &l.b2, &l.ws, &l.bs, &l.wb, &l.bb})
                out.insert(out.end(), arr->begin(), arr->end());
    };
    flatten(init, before_flat);
    flatten(after, after_flat);
    REQUIRE(before_flat.size() == ref_grad.size());

    int checked = 0;
    for (std::size_t j = 0; j < ref_grad.size(); ++j) {
        const double g = ref_grad[j];
        if (std::abs(g) < 1e-5) continue;
        const double delta = static_cast<double>(after_flat[j]) - before_flat[j];
        CHECK(delta * g < 0.0);
        ++checked;
    }
    CHECK(checked > 200);
}

TEST_CASE("training fits data and the density stays normalized") {
    FeatureSet ds = gaussian_mixture_2d(600, 17);
    FlowTrainConfig cfg;
    cfg.epochs = 100;
    cfg.batch_size = 128;
    cfg.lr = 2e-3f;
    cfg.n_layers = 6;
    cfg.hidden = 32;
    cfg.seed = 31;
    const FlowModel m = train_flow(ds, cfg);
    REQUIRE(m.train_curve.size() == 100);
    CHECK_FALSE(m.meta.aborted);
    CHECK(m.train_curve.back() < m.train_curve.front() - 0.05);

    const double step = 0.1;
    double mass = 0.0;
    for (double y = -10.0 + step / 2; y < 10.0; y += step)
        for (double x = -10.0 + step / 2; x < 10.0; x += step) {
            const std::vector<float> p{static_cast<float>(x), static_cast<float>(y)};
            mass += std::exp(log_density<float>(m, p)) * step * step;
        }
    CHECK(mass > 0.98);
    CHECK(mass < 1.02);
}

TEST_CASE("unit gaussian data trains to the analytic entropy") {
    FeatureSet ds;
    ds.count = 2000;
    ds.dim = 2;
    Rng rng(23);
    for (int i = 0; i < 4000; ++i) ds.data.push_back(static_cast<float>(rng.normal()));

    FlowTrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 128;
    cfg.lr = 1e-3f;
    cfg.n_layers = 4;
    cfg.hidden = 32;
    cfg.seed = 3;
    const FlowModel m = train_flow(ds, cfg);
    // Differential entropy of N(0, I_2): 1 + log(2*pi) = 2.8379.
    CHECK(m.meta.final_loss == doctest::Approx(2.8379).epsilon(0.04));
}

TEST_CASE("zero epochs returns the initialized model untouched") {
    FeatureSet ds = gaussian_mixture_2d(32, 2);
    FlowTrainConfig cfg;
    cfg.epochs = 0;
    cfg.n_layers = 3;
    cfg.hidden = 8;
    cfg.seed = 77;
    const FlowModel m = train_flow(ds, cfg);
    CHECK(m.train_curve.empty());
    CHECK(m.meta.epochs == 0);
    const FlowModel fresh = make_flow(2, 3, 8, 77);
    CHECK(m.layers[0].w1 == fresh.layers[0].w1);
    CHECK(m.layers[2].w2 == fresh.layers[2].w2);
}

TEST_CASE("training is reproducible per seed and varies across seeds") {
    FeatureSet ds = gaussian_mixture_2d(128, 41);
    FlowTrainConfig cfg;
    cfg.epochs = 3;
    cfg.n_layers = 3;
    cfg.hidden = 8;
    cfg.seed = 10;
    const FlowModel a = train_flow(ds, cfg);
    const FlowModel b = train_flow(ds, cfg);
    CHECK(a.layers[1].ws == b.layers[1].ws);
    CHECK(a.train_curve == b.train_curve);

    cfg.seed = 11;
    const FlowModel c = train_flow(ds, cfg);
    CHECK(a.layers[1].ws != c.layers[1].ws);
}

TEST_CASE("sampling an identity flow gives standard normal draws") {
    const FlowModel m = make_flow(4, 6, 16, 5);
    Rng rng(123);
    std::vector<double> mean(4, 0.0), sq(4, 0.0);
    const int n = 500;
    for (int i = 0; i < n; ++i) {
        const auto s = flow_sample(m, rng);
        for (int d = 0; d < 4; ++d) {
            mean[static_cast<std::size_t>(d)] += s[static_cast<std::size_t>(d)];
            sq[static_cast<std::size_t>(d)] += static_cast<double>(s[static_cast<std::size_t>(d)]) * s[static_cast<std::size_t>(d)];
        }
    }
    for (int d = 0; d < 4; ++d) {
        mean[static_cast<std::size_t>(d)] /= n;
        const double var = sq[static_cast<std::size_t>(d)] / n - mean[static_cast<std::size_t>(d)] * mean[static_cast<std::size_t>(d)];
        CHECK(std::abs(mean[static_cast<std::size_t>(d)]) < 0.15);
        CHECK(var == doctest::Approx(1.0).epsilon(0.25));
    }
}

TEST_CASE("checkpoint round trip is byte-identical and preserves the density") {
    FlowModel m = make_flow(8, 4, 16, 99, true);
    m.meta.epochs = 12;
    m.meta.final_loss = 3.25f;
    m.meta.seed = 99;
    m.train_curve = {4.0f, 3.5f, 3.25f};
    m.feat_mean.assign(8, 0.5f);
    m.feat_std.assign(8, 2.0f);

    const auto bytes = save_flow_checkpoint(m);
    const FlowModel loaded = load_flow_checkpoint(bytes);
    CHECK(save_flow_checkpoint(loaded) == bytes);
    CHECK(loaded.meta.epochs == 12);
    CHECK(loaded.meta.seed == 99);
    CHECK(loaded.train_curve == m.train_curve);

    const std::vector<double> probe{0.1, -0.5, 2.0, 1.0, -1.5, 0.25, 0.75, -2.0};
    CHECK(log_density<double>(loaded, probe) == log_density<double>(m, probe));
}

TEST_CASE("checkpoint loading rejects malformed input") {
    const FlowModel m = make_flow(4, 2, 8, 1);
    auto bytes = save_flow_checkpoint(m);

    auto corrupted = bytes;
    corrupted[0] = 'X';
    CHECK_THROWS_AS(load_flow_checkpoint(corrupted), std::runtime_error);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 10);
    CHECK_THROWS_AS(load_flow_checkpoint(truncated), std::runtime_error);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(load_flow_checkpoint(trailing), std::runtime_error);

    ContainerWriter w("NFCKPT01");
    w.header() = nlohmann::json::parse(R"({"version": 2})");
    const auto future = w.finish();
    CHECK_THROWS_AS(load_flow_checkpoint(future), std::runtime_error);

    CHECK_THROWS_AS(load_flow_checkpoint(std::vector<std::uint8_t>{1, 2, 3}), std::runtime_error);
}

TEST_CASE("construction and input validation") {
    CHECK_THROWS_AS(make_flow(3, 2, 8, 0), std::invalid_argument);  // odd dim
    CHECK_THROWS_AS(make_flow(0, 2, 8, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_flow(4, 0, 8, 0), std::invalid_argument);

    const FlowModel m = make_flow(4, 2, 8, 0);
    const std::vector<double> wrong{1.0, 2.0};
    CHECK_THROWS_AS(flow_forward<double>(m, wrong), std::invalid_argument);
    const std::vector<double> bad{1.0, 2.0, std::nan(""), 0.0};
    CHECK_THROWS_AS(log_density<double>(m, bad), std::invalid_argument);

    FeatureSet ds;
    ds.count = 2;
    ds.dim = 4;
    ds.data.assign(7, 0.0f);  // wrong length
    FlowTrainConfig cfg;
    CHECK_THROWS_AS(train_flow(ds, cfg), std::invalid_argument);
    ds.data.assign(8, 0.0f);
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train_flow(ds, cfg), std::invalid_argument);
}
