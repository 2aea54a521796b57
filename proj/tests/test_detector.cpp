// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <doctest.h>

#include "desk_models.hpp"
#include "flowlens/camsim.hpp"
#include "flowlens/detector.hpp"
#include "flowlens/rng.hpp"

using namespace flowlens;
using flowlens::testing::desk_models;

namespace {

DetectionBox box(int label, float x, float y, float w, float h, float conf = 1.0f) {
    DetectionBox b;
    b.label = label;
    b.x = x;
    b.y = y;
    b.w = w;
    b.h = h;
    b.confidence = conf;
    return b;
}

}  // namespace

TEST_CASE("iou matches hand-computed overlaps") {
    CHECK(iou(box(0, 0, 0, 10, 10), box(0, 5, 0, 10, 10)) == doctest::Approx(1.0f / 3.0f));
    CHECK(iou(box(0, 0, 0, 10, 10), box(0, 0, 0, 10, 10)) == doctest::Approx(1.0f));
    CHECK(iou(box(0, 0, 0, 10, 10), box(0, 20, 20, 5, 5)) == 0.0f);
    CHECK(iou(box(0, 0, 0, 10, 10), box(0, 10, 0, 10, 10)) == 0.0f);
    CHECK(iou(box(0, 0, 0, 0, 0), box(0, 0, 0, 10, 10)) == 0.0f);
    CHECK(iou(box(0, 1, 1, 6, 6), box(0, 0, 0, 8, 8)) == doctest::Approx(36.0f / 64.0f));
}

TEST_CASE("match accepts overlap at exactly half intersection-over-union") {
    const auto rep = match({box(2, 0, 0, 10, 5)}, {box(2, 0, 0, 10, 10)});
    CHECK(rep.correct.size() == 1);
    CHECK(rep.incorrect.empty());
}

TEST_CASE("match requires equal labels") {
    const auto rep = match({box(1, 0, 0, 10, 10)}, {box(2, 0, 0, 10, 10)});
    CHECK(rep.correct.empty());
    REQUIRE(rep.incorrect.size() == 2);
}

TEST_CASE("match adds unmatched truths to the incorrect list") {
    const auto rep = match({}, {box(0, 4, 4, 6, 6)});
    CHECK(rep.correct.empty());
    REQUIRE(rep.incorrect.size() == 1);
    CHECK(rep.incorrect[0].x == 4.0f);
}

TEST_CASE("match consumes each truth at most once and prefers confident predictions") {
    const std::vector<DetectionBox> preds = {
        box(0, 0, 0, 10, 10, 0.6f),
        box(0, 1, 0, 10, 10, 0.9f),
    };
    const auto rep = match(preds, {box(0, 0, 0, 10, 10)});
    REQUIRE(rep.correct.size() == 1);
    CHECK(rep.correct[0].confidence == 0.9f);
    REQUIRE(rep.incorrect.size() == 1);
    CHECK(rep.incorrect[0].confidence == 0.6f);
}

TEST_CASE("match pairs predictions with truths exactly when they coincide") {
    const Scene scene = generate_scene(ScenePreset::Nominal, 977);
    const std::vector<DetectionBox> truths = capture_truth(scene);
    const auto rep = match(truths, truths);
    CHECK(rep.correct.size() == truths.size());
    CHECK(rep.incorrect.empty());
}

TEST_CASE("detection windows cover the capture plane on the cell grid") {
    const auto& wins = detection_windows();
    CHECK(wins.size() == 110);
    int by_size[3] = {0, 0, 0};
    for (const Window& w : wins) {
        REQUIRE((w.size == 8 || w.size == 12 || w.size == 16));
        ++by_size[(w.size - 8) / 4];
        CHECK(w.x % 4 == 0);
        CHECK(w.y % 4 == 0);
        CHECK(w.x + w.size <= kCaptureSize);
        CHECK(w.y + w.size <= kCaptureSize);
    }
    CHECK(by_size[0] == 49);
    CHECK(by_size[1] == 36);
    CHECK(by_size[2] == 25);
}

TEST_CASE("pool_window returns per-channel mean and maximum over the window cells") {
    Tensor<float> backbone = Tensor<float>::full(Shape{8, 8, 16}, 0.0f);
    backbone.at3(0, 0, 2) = 4.0f;
    backbone.at3(1, 1, 2) = 8.0f;
    backbone.at3(3, 3, 5) = 12.0f;

    const auto p8 = pool_window(backbone, Window{0, 0, 8});
    CHECK(p8[2] == doctest::Approx(3.0f));
    CHECK(p8[16 + 2] == doctest::Approx(8.0f));
    CHECK(p8[5] == 0.0f);
    CHECK(p8[16 + 5] == 0.0f);

    const auto p16 = pool_window(backbone, Window{0, 0, 16});
    CHECK(p16[2] == doctest::Approx(12.0f / 16.0f));
    CHECK(p16[5] == doctest::Approx(12.0f / 16.0f));
    CHECK(p16[16 + 5] == 12.0f);
}

TEST_CASE("pool_window rejects malformed backbones and off-grid windows") {
    const Tensor<float> bad = Tensor<float>::full(Shape{8, 8, 8}, 0.0f);
    CHECK_THROWS_AS(pool_window(bad, Window{0, 0, 8}), std::invalid_argument);
    const Tensor<float> good = Tensor<float>::full(Shape{8, 8, 16}, 0.0f);
    CHECK_THROWS_AS(pool_window(good, Window{2, 0, 8}), std::invalid_argument);
    CHECK_THROWS_AS(pool_window(good, Window{0, 0, 6}), std::invalid_argument);
    CHECK_THROWS_AS(pool_window(good, Window{28, 0, 8}), std::invalid_argument);
}

TEST_CASE("detect_on_backbone validates the head shapes") {
    Detector det;
    det.head_w.assign(5 * 32, 0.0f);
    det.head_b.assign(5, 0.0f);
    det.reg_w.assign(4 * 3 * 35 - 1, 0.0f);
    const Tensor<float> backbone = Tensor<float>::full(Shape{8, 8, 16}, 0.0f);
    CHECK_THROWS_AS(detect_on_backbone(det, backbone), std::invalid_argument);
    det.reg_w.assign(4 * 3 * 35, 0.0f);
    CHECK_NOTHROW(detect_on_backbone(det, backbone));
}

TEST_CASE("capture_truth scales scene boxes to the capture resolution") {
    const Scene scene = generate_scene(ScenePreset::Nominal, 1234);
    const auto truths = capture_truth(scene);
    REQUIRE(truths.size() == scene.objects.size());
    for (const DetectionBox& t : truths) {
        CHECK(t.confidence == 1.0f);
        CHECK(t.label >= 0);
        CHECK(t.label < kObjectClassCount);
        CHECK(t.x >= 0.0f);
        CHECK(t.y >= 0.0f);
        CHECK(t.x + t.w <= static_cast<float>(kCaptureSize));
        CHECK(t.y + t.h <= static_cast<float>(kCaptureSize));
        CHECK(t.w >= 5.0f);
        CHECK(t.w <= 9.0f);
    }
}

TEST_CASE("detector training is deterministic for a fixed seed") {
    DetectorConfig dc;
    dc.n_scenes = 6;
    dc.epochs = 12;
    dc.seed = 55;
    const Detector a = train_detector(desk_models().fx, dc);
    const Detector b = train_detector(desk_models().fx, dc);
    CHECK(a.head_w == b.head_w);
    CHECK(a.head_b == b.head_b);
    CHECK(a.reg_w == b.reg_w);
}

TEST_CASE("featureless images yield no detections") {
    const auto& m = desk_models();
    for (float v : {0.0f, 0.5f, 1.0f}) {
        const Image flat = Tensor<float>::full(Shape{kCaptureSize, kCaptureSize, 3}, v);
        CHECK(detect(m.det, m.fx, flat).empty());
    }
}

TEST_CASE("detections stay inside the capture plane and repeat bit-identically") {
    const auto& m = desk_models();
    const Scene scene = generate_scene(ScenePreset::Nominal, 31);
    const Image img = capture(scene, CameraParams::defaults(), 32);
    const auto boxes = detect(m.det, m.fx, img);
    CHECK(!boxes.empty());
    for (const DetectionBox& b : boxes) {
        CHECK(b.x >= 0.0f);
        CHECK(b.y >= 0.0f);
        CHECK(b.x + b.w <= static_cast<float>(kCaptureSize));
        CHECK(b.y + b.h <= static_cast<float>(kCaptureSize));
        CHECK(b.confidence >= m.det.score_threshold);
        CHECK(b.confidence <= 1.0f);
    }
    const auto again = detect(m.det, m.fx, img);
    REQUIRE(again.size() == boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        CHECK(again[i].label == boxes[i].label);
        CHECK(again[i].x == boxes[i].x);
        CHECK(again[i].y == boxes[i].y);
        CHECK(again[i].w == boxes[i].w);
        CHECK(again[i].h == boxes[i].h);
        CHECK(again[i].confidence == boxes[i].confidence);
    }
}

TEST_CASE("trained detector finds at least nine of ten truths on held-out scenes") {
    const auto& m = desk_models();
    int truths_total = 0;
    int matched = 0;
    for (int i = 0; i < 100; ++i) {
        const Scene scene = generate_scene(ScenePreset::Nominal, mix_seed(0xabc1ULL, i));
        const Image img = capture(scene, CameraParams::defaults(), mix_seed(0xabc2ULL, i));
        const auto preds = detect(m.det, m.fx, img);
        const auto truths = capture_truth(scene);
        const auto rep = match(preds, truths);
        truths_total += static_cast<int>(truths.size());
        matched += static_cast<int>(rep.correct.size());
    }
    const double fraction = static_cast<double>(matched) / truths_total;
    INFO("matched fraction ", fraction);
    CHECK(fraction >= 0.90);
}

TEST_CASE("correlation experiment rejects an empty scene list") {
    const auto& m = desk_models();
    CHECK_THROWS_AS(correlation_experiment(m.flow, m.fx, m.det, {}), std::invalid_argument);
}

TEST_CASE("correlation experiment reports one row per box and repeats bit-identically") {
    const auto& m = desk_models();
    std::vector<Scene> scenes;
    for (int i = 0; i < 8; ++i)
        scenes.push_back(generate_scene(ScenePreset::Nominal, mix_seed(0xcc01ULL, i)));

    const CorrelationResult r1 = correlation_experiment(m.flow, m.fx, m.det, scenes);
    CHECK(r1.boxes.row_count() == static_cast<std::size_t>(r1.n_correct + r1.n_incorrect));
    CHECK(r1.n_correct > 0);
    if (r1.n_correct > 0) CHECK(r1.mean_correct.has_value());
    if (r1.n_incorrect == 0) CHECK(!r1.mean_incorrect.has_value());

    const CorrelationResult r2 = correlation_experiment(m.flow, m.fx, m.det, scenes);
    CHECK(r1.boxes.dump() == r2.boxes.dump());
    CHECK(r1.n_correct == r2.n_correct);
    CHECK(r1.n_incorrect == r2.n_incorrect);
}

TEST_CASE("correlation experiment is invariant to the thread count") {
    const auto& m = desk_models();
    std::vector<Scene> scenes;
    for (int i = 0; i < 6; ++i)
        scenes.push_back(generate_scene(ScenePreset::Nominal, mix_seed(0xcc02ULL, i)));
    const CorrelationResult a = correlation_experiment(m.flow, m.fx, m.det, scenes, 1);
    const CorrelationResult b = correlation_experiment(m.flow, m.fx, m.det, scenes, 2);
    CHECK(a.boxes.dump() == b.boxes.dump());
    CHECK(a.n_correct == b.n_correct);
    CHECK(a.n_incorrect == b.n_incorrect);
}
