// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <doctest.h>

#include "desk_models.hpp"
#include "flowlens/camsim.hpp"
#include "flowlens/oodscore.hpp"
#include "flowlens/rng.hpp"

using namespace flowlens;
using flowlens::testing::desk_models;

namespace {

Image test_capture(std::uint64_t seed) {
    const Scene scene = generate_scene(ScenePreset::Nominal, mix_seed(seed, 1ULL));
    return capture(scene, CameraParams::defaults(), mix_seed(seed, 2ULL));
}

Tensor<double> widen(const Image& img) {
    Tensor<double> out(img.shape);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        out.data[i] = static_cast<double>(img.data[i]);
    return out;
}

GradientMap ramp_map(int h, int w) {
    GradientMap m;
    m.values = Tensor<float>(Shape{h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            m.values.data[static_cast<std::size_t>(y * w + x)] = static_cast<float>(y * w + x);
    return m;
}

DetectionBox box(float x, float y, float w, float h) {
    DetectionBox b;
    b.x = x;
    b.y = y;
    b.w = w;
    b.h = h;
    return b;
}

}  // namespace

TEST_CASE("zero-weight extractor gives a zero gradient map") {
    const auto& m = desk_models();
    FeatureExtractor fx = m.fx;
    std::fill(fx.k1.begin(), fx.k1.end(), 0.0f);
    std::fill(fx.b1.begin(), fx.b1.end(), 0.0f);
    const Image img = test_capture(7);
    const GradientMap g = gradient_map(m.flow, fx, img);
    CHECK(g.variant == GradientVariant::LogDensityGradient);
    REQUIRE(g.values.shape == Shape{kCaptureSize, kCaptureSize});
    for (float v : g.values.data) CHECK(v == 0.0f);
    CHECK(avg_abs_gradient_score(g) == 0.0);
}

TEST_CASE("pixel gradients match central finite differences of the log density") {
    const auto& m = desk_models();
    const Tensor<double> img = widen(test_capture(11));
    const auto pg = log_density_pixel_gradients<double>(m.flow, m.fx, img);

    std::mt19937_64 rng(4242);
    std::uniform_int_distribution<int> pick(0, kCaptureSize - 1);
    const double step = 1e-4;
    for (int probe = 0; probe < 4; ++probe) {
        const int y = pick(rng);
        const int x = pick(rng);
        double fd_abs_sum = 0.0;
        for (int c = 0; c < 3; ++c) {
            Tensor<double> plus = img;
            Tensor<double> minus = img;
            plus.at3(y, x, c) += step;
            minus.at3(y, x, c) -= step;
            const double lp = log_density_pixel_gradients<double>(m.flow, m.fx, plus).log_density;
            const double lm = log_density_pixel_gradients<double>(m.flow, m.fx, minus).log_density;
            fd_abs_sum += std::fabs((lp - lm) / (2.0 * step));
        }
        const double fd = fd_abs_sum / 3.0;
        const double an = pg.map.data[static_cast<std::size_t>(y * kCaptureSize + x)];
        const double scale = std::max({std::fabs(fd), std::fabs(an), 1e-8});
        INFO("pixel (", y, ", ", x, ") fd ", fd, " analytic ", an);
        CHECK(std::fabs(fd - an) / scale < 1e-2);
    }
}

TEST_CASE("float and double gradient maps agree closely") {
    const auto& m = desk_models();
    const Image img = test_capture(13);
    const GradientMap gf = gradient_map(m.flow, m.fx, img);
    const auto gd = log_density_pixel_gradients<double>(m.flow, m.fx, widen(img));
    double max_abs = 0.0;
    for (double v : gd.map.data) max_abs = std::max(max_abs, std::fabs(v));
    REQUIRE(max_abs > 0.0);
    for (std::size_t i = 0; i < gf.values.data.size(); ++i) {
        const double diff = std::fabs(static_cast<double>(gf.values.data[i]) - gd.map.data[i]);
        CHECK(diff / max_abs < 1e-3);
    }
}

TEST_CASE("density-gradient variant rescales the log-density map uniformly") {
    const auto& m = desk_models();
    const Image img = test_capture(17);
    const GradientMap logm = gradient_map(m.flow, m.fx, img);
    const double lp = log_density_score(m.flow, m.fx, img);
    const double ref = lp - 1.5;
    const GradientMap dens =
        gradient_map(m.flow, m.fx, img, GradientVariant::DensityGradient, ref);
    CHECK(dens.variant == GradientVariant::DensityGradient);
    const double scale = std::exp(lp - ref);
    for (std::size_t i = 0; i < logm.values.data.size(); ++i)
        CHECK(dens.values.data[i] ==
              doctest::Approx(logm.values.data[i] * scale).epsilon(1e-4));
}

TEST_CASE("average absolute gradient score is the plain mean of the map") {
    GradientMap m;
    m.values = Tensor<float>(Shape{2, 2});
    m.values.data = {1.0f, 0.0f, 0.5f, 0.5f};
    CHECK(avg_abs_gradient_score(m) == doctest::Approx(0.5));
    GradientMap empty;
    CHECK_THROWS_AS(avg_abs_gradient_score(empty), std::invalid_argument);
}

TEST_CASE("log-density score equals the flow's log density of the extracted features") {
    const auto& m = desk_models();
    const Image img = test_capture(19);
    const std::vector<float> feat = extract(m.fx, img);
    const double direct = log_density(m.flow, std::span<const float>(feat));
    CHECK(log_density_score(m.flow, m.fx, img) == doctest::Approx(direct));
}

TEST_CASE("threshold calibration picks the nearest-rank cut at the target rate") {
    std::vector<double> scores;
    for (int i = 1; i <= 20; ++i) scores.push_back(static_cast<double>(i));

    SUBCASE("flag above") {
        const DecisionRule r = calibrate_threshold(scores, 0.05, true, "avg-grad");
        CHECK(r.tau == 19.0);
        CHECK(r.realized_fpr == doctest::Approx(0.05));
        CHECK(!r.degenerate);
        CHECK(r.kind == "avg-grad");
        CHECK(flags_as_ood(r, 19.5));
        CHECK(!flags_as_ood(r, 19.0));
    }
    SUBCASE("flag below") {
        const DecisionRule r = calibrate_threshold(scores, 0.05, false, "log-density");
        CHECK(r.tau == 2.0);
        CHECK(r.realized_fpr == doctest::Approx(0.05));
        CHECK(flags_as_ood(r, 1.5));
        CHECK(!flags_as_ood(r, 2.0));
    }
}

TEST_CASE("threshold calibration handles ties and tiny samples") {
    SUBCASE("all-equal scores flag nothing") {
        const std::vector<double> same(40, 3.25);
        const DecisionRule r = calibrate_threshold(same, 0.05, true);
        CHECK(r.realized_fpr == 0.0);
        CHECK(!flags_as_ood(r, 3.25));
    }
    SUBCASE("sample too small for the rate is degenerate") {
        std::vector<double> ten;
        for (int i = 1; i <= 10; ++i) ten.push_back(static_cast<double>(i));
        const DecisionRule r = calibrate_threshold(ten, 0.05, true);
        CHECK(r.degenerate);
        CHECK(r.realized_fpr == 0.0);
        CHECK(!flags_as_ood(r, 10.0));
    }
}

TEST_CASE("calibration never exceeds the requested false-positive rate") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> dist(-5.0, 5.0);
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 20 + static_cast<int>(rng() % 200);
        std::vector<double> scores(static_cast<std::size_t>(n));
        for (double& s : scores) s = dist(rng);
        for (bool greater : {true, false}) {
            const DecisionRule r = calibrate_threshold(scores, 0.05, greater);
            int flagged = 0;
            for (double s : scores)
                if (flags_as_ood(r, s)) ++flagged;
            const double fpr = static_cast<double>(flagged) / n;
            CHECK(fpr <= 0.05 + 1e-12);
            CHECK(fpr == doctest::Approx(r.realized_fpr));
        }
    }
}

TEST_CASE("threshold calibration rejects bad inputs") {
    const std::vector<double> ok = {1.0, 2.0, 3.0};
    CHECK_THROWS_AS(calibrate_threshold({}, 0.05, true), std::invalid_argument);
    CHECK_THROWS_AS(calibrate_threshold(ok, 0.0, true), std::invalid_argument);
    CHECK_THROWS_AS(calibrate_threshold(ok, 1.0, true), std::invalid_argument);
    const std::vector<double> nan = {1.0, std::nan(""), 3.0};
    CHECK_THROWS_AS(calibrate_threshold(nan, 0.05, true), std::invalid_argument);
}

TEST_CASE("roi objective averages over the box union with whole-image fallback") {
    const GradientMap m = ramp_map(4, 4);
    const double whole = avg_abs_gradient_score(m);

    SUBCASE("no boxes falls back to the whole image") {
        CHECK(roi_objective(m, {}) == doctest::Approx(whole));
    }
    SUBCASE("full-image box equals the whole-image average") {
        const DetectionBox b = box(0, 0, 4, 4);
        CHECK(roi_objective(m, std::span<const DetectionBox>(&b, 1)) == doctest::Approx(whole));
    }
    SUBCASE("interior box averages its own pixels") {
        const DetectionBox b = box(1, 1, 2, 2);
        CHECK(roi_objective(m, std::span<const DetectionBox>(&b, 1)) ==
              doctest::Approx((5.0 + 6.0 + 9.0 + 10.0) / 4.0));
    }
    SUBCASE("overlapping boxes count shared pixels once") {
        const std::vector<DetectionBox> bs = {box(0, 0, 2, 2), box(1, 1, 2, 2)};
        CHECK(roi_objective(m, bs) ==
              doctest::Approx((0.0 + 1.0 + 4.0 + 5.0 + 6.0 + 9.0 + 10.0) / 7.0));
    }
    SUBCASE("zero-area boxes are skipped") {
        const std::vector<DetectionBox> bs = {box(1, 1, 0, 2), box(1, 1, 2, 2)};
        CHECK(roi_objective(m, bs) == doctest::Approx((5.0 + 6.0 + 9.0 + 10.0) / 4.0));
    }
    SUBCASE("boxes fully outside the map fall back to the whole image") {
        const DetectionBox b = box(10, 10, 2, 2);
        CHECK(roi_objective(m, std::span<const DetectionBox>(&b, 1)) == doctest::Approx(whole));
    }
    SUBCASE("scaling the map scales the objective") {
        GradientMap scaled = ramp_map(4, 4);
        for (float& v : scaled.values.data) v *= 3.0f;
        const DetectionBox b = box(1, 1, 2, 2);
        CHECK(roi_objective(scaled, std::span<const DetectionBox>(&b, 1)) ==
              doctest::Approx(3.0 * roi_objective(m, std::span<const DetectionBox>(&b, 1))));
    }
}

TEST_CASE("roi objective counts pixels whose centers fall inside the box") {
    const GradientMap m = ramp_map(8, 8);
    std::mt19937_64 rng(7171);
    std::uniform_real_distribution<float> pos(-2.0f, 8.0f);
    std::uniform_real_distribution<float> len(0.3f, 6.0f);
    for (int trial = 0; trial < 50; ++trial) {
        const DetectionBox b = box(pos(rng), pos(rng), len(rng), len(rng));
        double sum = 0.0;
        int count = 0;
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                const float cx = static_cast<float>(x) + 0.5f;
                const float cy = static_cast<float>(y) + 0.5f;
                if (cx > b.x && cx < b.x + b.w && cy > b.y && cy < b.y + b.h) {
                    sum += m.values.data[static_cast<std::size_t>(y * 8 + x)];
                    ++count;
                }
            }
        const double expect = count > 0 ? sum / count : avg_abs_gradient_score(m);
        CHECK(roi_objective(m, std::span<const DetectionBox>(&b, 1)) == doctest::Approx(expect));
    }
}

TEST_CASE("non-finite gradients are rejected with the offending pixel") {
    const auto& m = desk_models();
    FeatureExtractor fx = m.fx;
    fx.k1[0] = std::numeric_limits<float>::quiet_NaN();
    const Image img = test_capture(23);
    try {
        gradient_map(m.flow, fx, img);
        FAIL("expected a runtime_error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("pixel (") != std::string::npos);
    }
}
