// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Out-of-distribution scores on top of flow + extractor: the scalar
// log-density score, the per-pixel absolute-gradient map of the log density
// (channel-averaged), the whole-image average-gradient score, the
// ROI-restricted objective, and fixed-FPR threshold calibration.

#ifndef FLOWLENS_OODSCORE_HPP
#define FLOWLENS_OODSCORE_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "flowlens/detector.hpp"
#include "flowlens/features.hpp"
#include "flowlens/flow.hpp"
#include "flowlens/tape.hpp"

namespace flowlens {

enum class GradientVariant { LogDensityGradient, DensityGradient };

struct GradientMap {
    Tensor<float> values;  // {H, W}
    GradientVariant variant = GradientVariant::LogDensityGradient;
};

template <typename T>
struct PixelGradients {
    Tensor<T> map;  // {H, W} channel-mean absolute gradient of log density
    double log_density = 0.0;
};

// Backpropagates the scalar log density through flow and extractor to the
// input pixels. Non-finite gradients are rejected with the offending pixel.
template <typename T>
PixelGradients<T> log_density_pixel_gradients(const FlowModel& m, const FeatureExtractor& fx,
                                              const Tensor<T>& img) {
    Tape<T> tape;
    const NodeId input = tape.leaf(img);
    const FeatureGraphNodes fg = build_feature_graph(tape, fx, input);
    const FlowGraph fl = build_flow_logp(tape, m, fg.features);
    const std::vector<Tensor<T>> grads = tape.backward(fl.logp);
    const Tensor<T>& g = grads[static_cast<std::size_t>(input)];

    const int h = img.shape.dim[0];
    const int w = img.shape.dim[1];
    const int c = img.shape.dim[2];
    PixelGradients<T> out;
    out.map = Tensor<T>(Shape{h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            T acc = T(0);
            for (int k = 0; k < c; ++k) {
                const T v = g.at3(y, x, k);
                if (!std::isfinite(static_cast<double>(v)))
                    throw std::runtime_error("non-finite log-density gradient at pixel (" +
                                             std::to_string(y) + ", " + std::to_string(x) + ")");
                acc += std::fabs(v);
            }
            out.map.data[static_cast<std::size_t>(y * w + x)] = acc / static_cast<T>(c);
        }
    }
    out.log_density = static_cast<double>(tape.value(fl.logp).data[0]);
    return out;
}

GradientMap gradient_map(const FlowModel& m, const FeatureExtractor& fx, const Image& img);
// Density variant: the log-density-gradient map scaled by exp(logp - c) for a
// caller-supplied reference log-density c held fixed across an optimization.
GradientMap gradient_map(const FlowModel& m, const FeatureExtractor& fx, const Image& img,
                         GradientVariant variant, double reference_log_density);

double avg_abs_gradient_score(const GradientMap& map);
double avg_abs_gradient_score(const FlowModel& m, const FeatureExtractor& fx, const Image& img);

double log_density_score(const FlowModel& m, const FeatureExtractor& fx, const Image& img);

struct DecisionRule {
    std::string kind;
    double tau = 0.0;
    bool flag_if_greater = true;
    double realized_fpr = 0.0;
    bool degenerate = false;
};

// Nearest-rank cut at false-positive rate alpha on the calibration scores.
DecisionRule calibrate_threshold(std::span<const double> scores, double alpha,
                                 bool flag_if_greater, const std::string& kind = "");

bool flags_as_ood(const DecisionRule& rule, double score);

struct PixelRect {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;  // half-open
    int y1 = 0;
};

// Pixels whose centers fall inside the box, clamped to an h x w map.
inline PixelRect box_pixel_rect(const DetectionBox& b, int h, int w) {
    PixelRect r;
    r.x0 = std::max(0, static_cast<int>(std::ceil(b.x - 0.5f)));
    r.y0 = std::max(0, static_cast<int>(std::ceil(b.y - 0.5f)));
    r.x1 = std::min(w, static_cast<int>(std::ceil(b.x + b.w - 0.5f)));
    r.y1 = std::min(h, static_cast<int>(std::ceil(b.y + b.h - 0.5f)));
    return r;
}

// Mean of the map over the pixel union of the boxes (clamped to bounds, each
// pixel counted once); empty or degenerate ROIs fall back to the whole-image
// average.
double roi_objective(const GradientMap& map, std::span<const DetectionBox> boxes);

}  // namespace flowlens

#endif
