// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include "flowlens/oodscore.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flowlens {

GradientMap gradient_map(const FlowModel& m, const FeatureExtractor& fx, const Image& img) {
    PixelGradients<float> pg = log_density_pixel_gradients(m, fx, img);
    GradientMap out;
    out.values = std::move(pg.map);
    out.variant = GradientVariant::LogDensityGradient;
    return out;
}

GradientMap gradient_map(const FlowModel& m, const FeatureExtractor& fx, const Image& img,
                         GradientVariant variant, double reference_log_density) {
    PixelGradients<float> pg = log_density_pixel_gradients(m, fx, img);
    GradientMap out;
    out.values = std::move(pg.map);
    out.variant = variant;
    if (variant == GradientVariant::DensityGradient) {
        const double scale = std::exp(pg.log_density - reference_log_density);
        if (!std::isfinite(scale))
            throw std::runtime_error("density gradient scale is non-finite (log density " +
                                     std::to_string(pg.log_density) + ", reference " +
                                     std::to_string(reference_log_density) + ")");
        for (float& v : out.values.data) v = static_cast<float>(v * scale);
    }
    return out;
}

double avg_abs_gradient_score(const GradientMap& map) {
    if (map.values.data.empty()) throw std::invalid_argument("avg_abs_gradient_score: empty map");
    double acc = 0.0;
    for (float v : map.values.data) acc += v;
    return acc / static_cast<double>(map.values.data.size());
}

double avg_abs_gradient_score(const FlowModel& m, const FeatureExtractor& fx, const Image& img) {
    return avg_abs_gradient_score(gradient_map(m, fx, img));
}

double log_density_score(const FlowModel& m, const FeatureExtractor& fx, const Image& img) {
    const std::vector<float> feat = extract(fx, img);
    return log_density(m, std::span<const float>(feat));
}

DecisionRule calibrate_threshold(std::span<const double> scores, double alpha,
                                 bool flag_if_greater, const std::string& kind) {
    if (scores.empty()) throw std::invalid_argument("calibrate_threshold: no calibration scores");
    if (!(alpha > 0.0 && alpha < 1.0))
        throw std::invalid_argument("calibrate_threshold: alpha must be in (0, 1)");
    for (double s : scores)
        if (!std::isfinite(s))
            throw std::invalid_argument("calibrate_threshold: non-finite calibration score");

    std::vector<double> s(scores.begin(), scores.end());
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();

    DecisionRule rule;
    rule.kind = kind;
    rule.flag_if_greater = flag_if_greater;
    rule.degenerate = static_cast<double>(n) * alpha < 1.0;

    // Nearest-rank cuts; the epsilon keeps exact-integer products on the
    // intended side of ceil and floor.
    std::size_t rank;  // 1-indexed into the sorted scores
    if (flag_if_greater) {
        rank = static_cast<std::size_t>(std::ceil((1.0 - alpha) * static_cast<double>(n) - 1e-9));
    } else {
        rank = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n) + 1e-9)) + 1;
    }
    rank = std::clamp<std::size_t>(rank, 1, n);
    rule.tau = s[rank - 1];

    std::size_t flagged = 0;
    for (double v : s)
        if (flag_if_greater ? v > rule.tau : v < rule.tau) ++flagged;
    rule.realized_fpr = static_cast<double>(flagged) / static_cast<double>(n);
    return rule;
}

bool flags_as_ood(const DecisionRule& rule, double score) {
    return rule.flag_if_greater ? score > rule.tau : score < rule.tau;
}

double roi_objective(const GradientMap& map, std::span<const DetectionBox> boxes) {
    const int h = map.values.shape.dim[0];
    const int w = map.values.shape.dim[1];
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0);
    for (const DetectionBox& b : boxes) {
        if (!(b.w > 0.0f) || !(b.h > 0.0f)) continue;
        const PixelRect r = box_pixel_rect(b, h, w);
        for (int y = r.y0; y < r.y1; ++y)
            for (int x = r.x0; x < r.x1; ++x) mask[static_cast<std::size_t>(y * w + x)] = 1;
    }

    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        acc += map.values.data[i];
        ++count;
    }
    if (count == 0) return avg_abs_gradient_score(map);
    return acc / static_cast<double>(count);
}

}  // namespace flowlens
