// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Sliding-window detector over the extractor's backbone map: pooled window
// features are scored by a small softmax head (object classes + background),
// followed by greedy NMS, box regression from the window features, and
// duplicate merging. Matching against ground truth uses greedy
// confidence-ordered assignment at IoU >= 0.5 with equal labels; unmatched
// truths count as incorrect.

#ifndef FLOWLENS_DETECTOR_HPP
#define FLOWLENS_DETECTOR_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "flowlens/camsim.hpp"
#include "flowlens/csv.hpp"
#include "flowlens/features.hpp"
#include "flowlens/flow.hpp"

namespace flowlens {

struct DetectionBox {
    int label = 0;
    float x = 0.0f;
    float y = 0.0f;
    float w = 0.0f;
    float h = 0.0f;
    float confidence = 1.0f;
};

float iou(const DetectionBox& a, const DetectionBox& b);

struct MatchReport {
    std::vector<DetectionBox> correct;
    std::vector<DetectionBox> incorrect;
};

MatchReport match(const std::vector<DetectionBox>& preds, const std::vector<DetectionBox>& truths);

struct Window {
    int x = 0;
    int y = 0;
    int size = 0;
};

// All stride-4 windows of sizes {8, 12, 16} over the capture plane.
const std::vector<Window>& detection_windows();

std::array<float, 32> pool_window(const Tensor<float>& backbone, const Window& win);

struct DetectorConfig {
    int n_scenes = 250;
    int epochs = 300;
    float lr = 0.05f;
    int batch_size = 128;
    float score_threshold = 0.35f;
    float nms_iou = 0.5f;
    std::uint64_t seed = 0;
};

struct Detector {
    int n_classes = kObjectClassCount;
    std::vector<float> head_w;  // {(n_classes + 1) * 32}, background last
    std::vector<float> head_b;  // {n_classes + 1}
    // Box regression: center offset and log size relative to the window,
    // linear per class in the pooled features plus a window-size indicator.
    std::vector<float> reg_w;  // {n_classes * 3 * 35}: 32 pooled inputs + 3 size one-hots
    float score_threshold = 0.35f;
    float nms_iou = 0.5f;
};

Detector train_detector(const FeatureExtractor& fx, const DetectorConfig& config);

std::vector<DetectionBox> detect(const Detector& det, const FeatureExtractor& fx, const Image& img);
std::vector<DetectionBox> detect_on_backbone(const Detector& det, const Tensor<float>& backbone);

// Ground-truth boxes of a scene in capture coordinates, confidence 1.
std::vector<DetectionBox> capture_truth(const Scene& scene);

struct CorrelationResult {
    std::optional<double> mean_correct;
    std::optional<double> mean_incorrect;
    int n_correct = 0;
    int n_incorrect = 0;
    CsvTable boxes = CsvTable({});
};

CorrelationResult correlation_experiment(const FlowModel& model, const FeatureExtractor& fx,
                                         const Detector& det, const std::vector<Scene>& scenes,
                                         int threads = 1);

}  // namespace flowlens

#endif
