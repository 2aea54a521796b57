// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include "flowlens/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>

#include "flowlens/oodscore.hpp"
#include "flowlens/parallel.hpp"
#include "flowlens/rng.hpp"

namespace flowlens {

namespace {

constexpr int kBackboneCells = 8;
constexpr int kCellStride = 4;
constexpr int kChannels = 16;
constexpr int kPoolDim = 2 * kChannels;

// Window mining bands for head training: positives must overlap a truth well,
// negatives must barely touch any, and the band between is left unlabeled.
constexpr float kPositiveIou = 0.55f;
constexpr float kBestPositiveIou = 0.3f;
constexpr float kNegativeIou = 0.25f;
constexpr int kNegativesPerPositive = 3;

// Box regression: targets are (center offset x, center offset y, log size),
// all relative to the window size, fit by ridge least squares on the mined
// positives. Inputs are the pooled features plus a window-size one-hot.
// Predictions are clamped to the plausible range around a window.
constexpr int kRegInputs = kPoolDim + 3;
constexpr double kRegRidge = 1e-3;
constexpr float kRegMaxOffset = 0.5f;
constexpr float kRegMinLogSize = -1.5f;
constexpr float kRegMaxLogSize = 0.5f;

// Overlapping same-label boxes after regression are one object seen by
// several windows; they merge by confidence-weighted averaging.
constexpr float kMergeIou = 0.25f;

int size_slot(int window_size) { return window_size / kCellStride - 2; }

void fill_reg_inputs(const Window& win, const std::array<float, 32>& pooled, float* row) {
    for (int i = 0; i < kPoolDim; ++i) row[i] = pooled[static_cast<std::size_t>(i)];
    row[kPoolDim] = 0.0f;
    row[kPoolDim + 1] = 0.0f;
    row[kPoolDim + 2] = 0.0f;
    row[kPoolDim + size_slot(win.size)] = 1.0f;
}

DetectionBox window_box(const Window& win) {
    return DetectionBox{0, static_cast<float>(win.x), static_cast<float>(win.y),
                        static_cast<float>(win.size), static_cast<float>(win.size), 1.0f};
}

struct WindowScore {
    int label = 0;
    float confidence = 0.0f;
};

WindowScore score_window(const Detector& det, const std::array<float, 32>& pooled) {
    const int classes = det.n_classes + 1;
    std::vector<float> logits(static_cast<std::size_t>(classes));
    for (int j = 0; j < classes; ++j) {
        float acc = det.head_b[static_cast<std::size_t>(j)];
        for (int i = 0; i < kPoolDim; ++i)
            acc += det.head_w[static_cast<std::size_t>(j * kPoolDim + i)] *
                   pooled[static_cast<std::size_t>(i)];
        logits[static_cast<std::size_t>(j)] = acc;
    }
    const float top = *std::max_element(logits.begin(), logits.end());
    float denom = 0.0f;
    for (float& v : logits) {
        v = std::exp(v - top);
        denom += v;
    }
    WindowScore out;
    for (int j = 1; j < classes; ++j)
        if (logits[static_cast<std::size_t>(j)] > logits[static_cast<std::size_t>(out.label)])
            out.label = j;
    out.confidence = logits[static_cast<std::size_t>(out.label)] / denom;
    return out;
}

void check_head(const Detector& det) {
    const int classes = det.n_classes + 1;
    if (det.n_classes <= 0 ||
        det.head_w.size() != static_cast<std::size_t>(classes) * kPoolDim ||
        det.head_b.size() != static_cast<std::size_t>(classes) ||
        det.reg_w.size() != static_cast<std::size_t>(det.n_classes) * 3 * kRegInputs)
        throw std::invalid_argument("detector head sizes do not match the class count");
}

DetectionBox regress_box(const Detector& det, const Window& win,
                         const std::array<float, 32>& pooled, int label, float confidence) {
    float row[kRegInputs];
    fill_reg_inputs(win, pooled, row);
    const std::size_t block = static_cast<std::size_t>(label) * 3 * kRegInputs;
    float t[3];
    for (int j = 0; j < 3; ++j) {
        float acc = 0.0f;
        for (int i = 0; i < kRegInputs; ++i)
            acc += det.reg_w[block + static_cast<std::size_t>(j * kRegInputs + i)] * row[i];
        t[j] = acc;
    }
    t[0] = std::clamp(t[0], -kRegMaxOffset, kRegMaxOffset);
    t[1] = std::clamp(t[1], -kRegMaxOffset, kRegMaxOffset);
    t[2] = std::clamp(t[2], kRegMinLogSize, kRegMaxLogSize);

    const float wsize = static_cast<float>(win.size);
    const float cx = static_cast<float>(win.x) + 0.5f * wsize + t[0] * wsize;
    const float cy = static_cast<float>(win.y) + 0.5f * wsize + t[1] * wsize;
    const float size = std::min(wsize * std::exp(t[2]), static_cast<float>(kCaptureSize));
    DetectionBox box;
    box.label = label;
    box.w = size;
    box.h = size;
    box.x = std::clamp(cx - 0.5f * size, 0.0f, static_cast<float>(kCaptureSize) - size);
    box.y = std::clamp(cy - 0.5f * size, 0.0f, static_cast<float>(kCaptureSize) - size);
    box.confidence = confidence;
    return box;
}

}  // namespace

float iou(const DetectionBox& a, const DetectionBox& b) {
    const float iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
    const float ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
    if (iw <= 0.0f || ih <= 0.0f) return 0.0f;
    const float inter = iw * ih;
    const float uni = a.w * a.h + b.w * b.h - inter;
    if (uni <= 0.0f) return 0.0f;
    return inter / uni;
}

MatchReport match(const std::vector<DetectionBox>& preds, const std::vector<DetectionBox>& truths) {
    std::vector<std::size_t> order(preds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return preds[a].confidence > preds[b].confidence;
    });

    MatchReport rep;
    std::vector<char> used(truths.size(), 0);
    for (std::size_t idx : order) {
        const DetectionBox& p = preds[idx];
        int best = -1;
        float best_iou = 0.0f;
        for (std::size_t t = 0; t < truths.size(); ++t) {
            if (used[t] || truths[t].label != p.label) continue;
            const float v = iou(p, truths[t]);
            if (v >= 0.5f && v > best_iou) {
                best = static_cast<int>(t);
                best_iou = v;
            }
        }
        if (best >= 0) {
            used[static_cast<std::size_t>(best)] = 1;
            rep.correct.push_back(p);
        } else {
            rep.incorrect.push_back(p);
        }
    }
    for (std::size_t t = 0; t < truths.size(); ++t)
        if (!used[t]) rep.incorrect.push_back(truths[t]);
    return rep;
}

const std::vector<Window>& detection_windows() {
    static const std::vector<Window> windows = [] {
        std::vector<Window> all;
        for (int size : {8, 12, 16})
            for (int y = 0; y + size <= kCaptureSize; y += kCellStride)
                for (int x = 0; x + size <= kCaptureSize; x += kCellStride)
                    all.push_back({x, y, size});
        return all;
    }();
    return windows;
}

std::array<float, 32> pool_window(const Tensor<float>& backbone, const Window& win) {
    if (backbone.shape != Shape{kBackboneCells, kBackboneCells, kChannels})
        throw std::invalid_argument("pool_window: backbone must be 8x8x16, got " +
                                    backbone.shape.str());
    if (win.size <= 0 || win.x < 0 || win.y < 0 || win.x % kCellStride != 0 ||
        win.y % kCellStride != 0 || win.size % kCellStride != 0 ||
        win.x + win.size > kCaptureSize || win.y + win.size > kCaptureSize)
        throw std::invalid_argument("pool_window: window is not on the cell grid");

    const int cx0 = win.x / kCellStride;
    const int cy0 = win.y / kCellStride;
    const int span = win.size / kCellStride;
    std::array<float, 32> out{};
    for (int ch = 0; ch < kChannels; ++ch)
        out[static_cast<std::size_t>(kChannels + ch)] = std::numeric_limits<float>::lowest();
    for (int cy = cy0; cy < cy0 + span; ++cy)
        for (int cx = cx0; cx < cx0 + span; ++cx)
            for (int ch = 0; ch < kChannels; ++ch) {
                const float v = backbone.at3(cy, cx, ch);
                out[static_cast<std::size_t>(ch)] += v;
                float& m = out[static_cast<std::size_t>(kChannels + ch)];
                if (v > m) m = v;
            }
    const float inv = 1.0f / static_cast<float>(span * span);
    for (int ch = 0; ch < kChannels; ++ch) out[static_cast<std::size_t>(ch)] *= inv;
    return out;
}

std::vector<DetectionBox> detect_on_backbone(const Detector& det, const Tensor<float>& backbone) {
    check_head(det);

    struct Candidate {
        Window win;
        int label = 0;
        float confidence = 0.0f;
        std::array<float, 32> pooled{};
    };
    std::vector<Candidate> cands;
    for (const Window& win : detection_windows()) {
        const std::array<float, 32> pooled = pool_window(backbone, win);
        const WindowScore score = score_window(det, pooled);
        if (score.label == det.n_classes) continue;
        if (score.confidence < det.score_threshold) continue;
        cands.push_back({win, score.label, score.confidence, pooled});
    }

    std::vector<std::size_t> order(cands.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return cands[a].confidence > cands[b].confidence;
    });

    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (std::size_t k : kept) {
            if (iou(window_box(cands[idx].win), window_box(cands[k].win)) >= det.nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(idx);
    }

    // Regression pulls every surviving window onto its object; overlapping
    // same-label boxes are views of one object and merge by weighted
    // averaging. Squaring the margin above the score threshold keeps weak
    // side views from dragging the strong peak.
    auto view_weight = [&](float confidence) {
        const float u = (confidence - det.score_threshold) / (1.0f - det.score_threshold);
        return static_cast<double>(u) * u + 1e-6;
    };
    std::vector<DetectionBox> out;
    std::vector<double> weight;
    for (std::size_t k : kept) {
        const Candidate& peak = cands[k];
        const DetectionBox b =
            regress_box(det, peak.win, peak.pooled, peak.label, peak.confidence);
        int target = -1;
        for (std::size_t f = 0; f < out.size(); ++f) {
            if (out[f].label == b.label && iou(out[f], b) >= kMergeIou) {
                target = static_cast<int>(f);
                break;
            }
        }
        if (target < 0) {
            out.push_back(b);
            weight.push_back(view_weight(b.confidence));
            continue;
        }
        DetectionBox& dst = out[static_cast<std::size_t>(target)];
        const double wa = weight[static_cast<std::size_t>(target)];
        const double wb = view_weight(b.confidence);
        const double inv = 1.0 / (wa + wb);
        dst.x = static_cast<float>((wa * dst.x + wb * b.x) * inv);
        dst.y = static_cast<float>((wa * dst.y + wb * b.y) * inv);
        dst.w = static_cast<float>((wa * dst.w + wb * b.w) * inv);
        dst.h = static_cast<float>((wa * dst.h + wb * b.h) * inv);
        weight[static_cast<std::size_t>(target)] = wa + wb;
    }
    return out;
}

std::vector<DetectionBox> detect(const Detector& det, const FeatureExtractor& fx, const Image& img) {
    return detect_on_backbone(det, extract_with_backbone(fx, img).backbone);
}

std::vector<DetectionBox> capture_truth(const Scene& scene) {
    std::vector<DetectionBox> out;
    for (const SceneObject& obj : scene.objects) {
        const SceneObject s = scaled_to_capture(obj);
        out.push_back({s.label, static_cast<float>(s.x), static_cast<float>(s.y),
                       static_cast<float>(s.w), static_cast<float>(s.h), 1.0f});
    }
    return out;
}

Detector train_detector(const FeatureExtractor& fx, const DetectorConfig& config) {
    if (config.n_scenes < 1) throw std::invalid_argument("train_detector: n_scenes must be >= 1");
    if (config.epochs < 1) throw std::invalid_argument("train_detector: epochs must be >= 1");
    if (!(config.lr > 0.0f)) throw std::invalid_argument("train_detector: lr must be positive");
    if (config.batch_size < 1) throw std::invalid_argument("train_detector: batch_size must be >= 1");

    const auto& wins = detection_windows();
    const int classes = kObjectClassCount + 1;
    const int background = kObjectClassCount;

    std::vector<std::array<float, 32>> xs;
    std::vector<int> ys;
    Rng neg_rng(mix_seed(config.seed, 0x646e6567ULL));

    // Per-class ridge normal equations for box regression.
    std::vector<std::vector<double>> reg_a(
        kObjectClassCount, std::vector<double>(static_cast<std::size_t>(kRegInputs) * kRegInputs, 0.0));
    std::vector<std::vector<double>> reg_y(
        kObjectClassCount, std::vector<double>(static_cast<std::size_t>(kRegInputs) * 3, 0.0));

    for (int i = 0; i < config.n_scenes; ++i) {
        const Scene scene =
            generate_scene(ScenePreset::Nominal, mix_seed(config.seed, 0x6473636eULL,
                                                          static_cast<std::uint64_t>(i)));
        const Image img = capture(scene, CameraParams::defaults(),
                                  mix_seed(config.seed, 0x64636170ULL,
                                           static_cast<std::uint64_t>(i)));
        const Tensor<float> backbone = extract_with_backbone(fx, img).backbone;
        const std::vector<DetectionBox> truths = capture_truth(scene);

        std::vector<int> assigned(wins.size(), -1);
        std::vector<float> max_iou(wins.size(), 0.0f);
        for (std::size_t wi = 0; wi < wins.size(); ++wi) {
            const DetectionBox wb = window_box(wins[wi]);
            int best_truth = -1;
            for (std::size_t ti = 0; ti < truths.size(); ++ti) {
                const float v = iou(wb, truths[ti]);
                if (v > max_iou[wi]) {
                    max_iou[wi] = v;
                    best_truth = static_cast<int>(ti);
                }
            }
            if (max_iou[wi] >= kPositiveIou) assigned[wi] = best_truth;
        }
        for (std::size_t ti = 0; ti < truths.size(); ++ti) {
            float best = 0.0f;
            std::size_t bw = 0;
            for (std::size_t wi = 0; wi < wins.size(); ++wi) {
                const float v = iou(window_box(wins[wi]), truths[ti]);
                if (v > best) {
                    best = v;
                    bw = wi;
                }
            }
            if (best >= kBestPositiveIou) assigned[bw] = static_cast<int>(ti);
        }

        std::vector<std::size_t> negatives;
        std::size_t positives = 0;
        for (std::size_t wi = 0; wi < wins.size(); ++wi) {
            if (assigned[wi] >= 0)
                ++positives;
            else if (max_iou[wi] < kNegativeIou)
                negatives.push_back(wi);
        }
        neg_rng.shuffle(negatives);
        const std::size_t take =
            std::min(negatives.size(), positives * static_cast<std::size_t>(kNegativesPerPositive));

        for (std::size_t wi = 0; wi < wins.size(); ++wi) {
            if (assigned[wi] < 0) continue;
            const DetectionBox& t = truths[static_cast<std::size_t>(assigned[wi])];
            const Window& win = wins[wi];
            const std::array<float, 32> pooled = pool_window(backbone, win);
            xs.push_back(pooled);
            ys.push_back(t.label);

            const double size = win.size;
            float rowf[kRegInputs];
            fill_reg_inputs(win, pooled, rowf);
            double row[kRegInputs];
            for (int d = 0; d < kRegInputs; ++d) row[d] = rowf[d];
            const double target[3] = {
                ((t.x + 0.5 * t.w) - (win.x + 0.5 * size)) / size,
                ((t.y + 0.5 * t.h) - (win.y + 0.5 * size)) / size,
                std::log(static_cast<double>(t.w) / size),
            };
            std::vector<double>& ra = reg_a[static_cast<std::size_t>(t.label)];
            std::vector<double>& ry = reg_y[static_cast<std::size_t>(t.label)];
            for (int a = 0; a < kRegInputs; ++a) {
                for (int b2 = 0; b2 < kRegInputs; ++b2)
                    ra[static_cast<std::size_t>(a * kRegInputs + b2)] += row[a] * row[b2];
                for (int j = 0; j < 3; ++j)
                    ry[static_cast<std::size_t>(a * 3 + j)] += row[a] * target[j];
            }
        }
        for (std::size_t j = 0; j < take; ++j) {
            xs.push_back(pool_window(backbone, wins[negatives[j]]));
            ys.push_back(background);
        }
    }

    if (std::none_of(ys.begin(), ys.end(), [&](int y) { return y != background; }))
        throw std::runtime_error("train_detector: no positive windows were mined");

    // Featureless flat captures anchor the background class so object-free
    // images yield no detections.
    for (float v : {0.0f, 0.5f, 1.0f}) {
        const Image flat = Tensor<float>::full(Shape{kCaptureSize, kCaptureSize, 3}, v);
        const Tensor<float> backbone = extract_with_backbone(fx, flat).backbone;
        for (std::size_t wi = 0; wi < wins.size(); wi += 3) {
            xs.push_back(pool_window(backbone, wins[wi]));
            ys.push_back(background);
        }
    }

    std::vector<float> w(static_cast<std::size_t>(classes) * kPoolDim, 0.0f);
    std::vector<float> b(static_cast<std::size_t>(classes), 0.0f);
    std::vector<float> mw(w.size(), 0.0f), vw(w.size(), 0.0f);
    std::vector<float> mb(b.size(), 0.0f), vb(b.size(), 0.0f);
    std::vector<float> gw(w.size()), gb(b.size());
    const float beta1 = 0.9f;
    const float beta2 = 0.999f;
    const float eps = 1e-8f;
    int step = 0;

    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng(mix_seed(config.seed, 0x646f7264ULL));

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        order_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            std::fill(gw.begin(), gw.end(), 0.0f);
            std::fill(gb.begin(), gb.end(), 0.0f);
            for (std::size_t s = start; s < stop; ++s) {
                const std::array<float, 32>& x = xs[order[s]];
                const int y = ys[order[s]];
                std::vector<float> p(static_cast<std::size_t>(classes));
                for (int j = 0; j < classes; ++j) {
                    float acc = b[static_cast<std::size_t>(j)];
                    for (int d = 0; d < kPoolDim; ++d)
                        acc += w[static_cast<std::size_t>(j * kPoolDim + d)] *
                               x[static_cast<std::size_t>(d)];
                    p[static_cast<std::size_t>(j)] = acc;
                }
                const float top = *std::max_element(p.begin(), p.end());
                float denom = 0.0f;
                for (float& v : p) {
                    v = std::exp(v - top);
                    denom += v;
                }
                for (float& v : p) v /= denom;
                p[static_cast<std::size_t>(y)] -= 1.0f;
                for (int j = 0; j < classes; ++j) {
                    const float pj = p[static_cast<std::size_t>(j)];
                    gb[static_cast<std::size_t>(j)] += pj;
                    for (int d = 0; d < kPoolDim; ++d)
                        gw[static_cast<std::size_t>(j * kPoolDim + d)] +=
                            pj * x[static_cast<std::size_t>(d)];
                }
            }
            const float inv = 1.0f / static_cast<float>(stop - start);
            ++step;
            const float c1 = 1.0f - std::pow(beta1, static_cast<float>(step));
            const float c2 = 1.0f - std::pow(beta2, static_cast<float>(step));
            auto adam = [&](std::vector<float>& theta, std::vector<float>& m,
                            std::vector<float>& v2, const std::vector<float>& g) {
                for (std::size_t k = 0; k < theta.size(); ++k) {
                    const float gk = g[k] * inv;
                    m[k] = beta1 * m[k] + (1.0f - beta1) * gk;
                    v2[k] = beta2 * v2[k] + (1.0f - beta2) * gk * gk;
                    theta[k] -= config.lr * (m[k] / c1) / (std::sqrt(v2[k] / c2) + eps);
                }
            };
            adam(w, mw, vw, gw);
            adam(b, mb, vb, gb);
        }
    }

    // Gauss-Jordan solve of the ridge-damped normal equations, three targets
    // per object class.
    auto solve_reg = [](std::vector<double>& ra, std::vector<double>& ry) {
        for (int a = 0; a < kRegInputs; ++a)
            ra[static_cast<std::size_t>(a * kRegInputs + a)] += kRegRidge;
        for (int col = 0; col < kRegInputs; ++col) {
            int piv = col;
            for (int r = col + 1; r < kRegInputs; ++r)
                if (std::fabs(ra[static_cast<std::size_t>(r * kRegInputs + col)]) >
                    std::fabs(ra[static_cast<std::size_t>(piv * kRegInputs + col)]))
                    piv = r;
            if (std::fabs(ra[static_cast<std::size_t>(piv * kRegInputs + col)]) < 1e-12)
                throw std::runtime_error("train_detector: degenerate box regression system");
            if (piv != col) {
                for (int c2 = 0; c2 < kRegInputs; ++c2)
                    std::swap(ra[static_cast<std::size_t>(piv * kRegInputs + c2)],
                              ra[static_cast<std::size_t>(col * kRegInputs + c2)]);
                for (int j = 0; j < 3; ++j)
                    std::swap(ry[static_cast<std::size_t>(piv * 3 + j)],
                              ry[static_cast<std::size_t>(col * 3 + j)]);
            }
            const double d = ra[static_cast<std::size_t>(col * kRegInputs + col)];
            for (int r = 0; r < kRegInputs; ++r) {
                if (r == col) continue;
                const double f = ra[static_cast<std::size_t>(r * kRegInputs + col)] / d;
                if (f == 0.0) continue;
                for (int c2 = 0; c2 < kRegInputs; ++c2)
                    ra[static_cast<std::size_t>(r * kRegInputs + c2)] -=
                        f * ra[static_cast<std::size_t>(col * kRegInputs + c2)];
                for (int j = 0; j < 3; ++j)
                    ry[static_cast<std::size_t>(r * 3 + j)] -=
                        f * ry[static_cast<std::size_t>(col * 3 + j)];
            }
        }
    };

    Detector det;
    det.n_classes = kObjectClassCount;
    det.head_w = std::move(w);
    det.head_b = std::move(b);
    det.reg_w.resize(static_cast<std::size_t>(kObjectClassCount) * 3 * kRegInputs);
    for (int c = 0; c < kObjectClassCount; ++c) {
        std::vector<double>& ra = reg_a[static_cast<std::size_t>(c)];
        std::vector<double>& ry = reg_y[static_cast<std::size_t>(c)];
        solve_reg(ra, ry);
        const std::size_t block = static_cast<std::size_t>(c) * 3 * kRegInputs;
        for (int j = 0; j < 3; ++j)
            for (int i = 0; i < kRegInputs; ++i)
                det.reg_w[block + static_cast<std::size_t>(j * kRegInputs + i)] =
                    static_cast<float>(ry[static_cast<std::size_t>(i * 3 + j)] /
                                       ra[static_cast<std::size_t>(i * kRegInputs + i)]);
    }
    det.score_threshold = config.score_threshold;
    det.nms_iou = config.nms_iou;
    return det;
}

CorrelationResult correlation_experiment(const FlowModel& model, const FeatureExtractor& fx,
                                         const Detector& det, const std::vector<Scene>& scenes,
                                         int threads) {
    if (scenes.empty()) throw std::invalid_argument("correlation_experiment: no scenes");
    check_head(det);

    struct Row {
        std::string image_id;
        DetectionBox box;
        bool correct = false;
        bool has_mean = false;
        double mean = 0.0;
    };
    std::vector<std::vector<Row>> rows(scenes.size());
    parallel_for(static_cast<int>(scenes.size()), threads, [&](int i) {
        const Scene& scene = scenes[static_cast<std::size_t>(i)];
        const Image img =
            capture(scene, CameraParams::defaults(), mix_seed(scene.seed, 0x636f7272ULL));
        const ExtractionResult er = extract_with_backbone(fx, img);
        const std::vector<DetectionBox> dets = detect_on_backbone(det, er.backbone);
        const MatchReport rep = match(dets, capture_truth(scene));
        const GradientMap gm = gradient_map(model, fx, img);
        const std::string id = preset_name(scene.preset) + "-" + std::to_string(scene.seed);
        auto add = [&](const DetectionBox& box, bool correct) {
            const PixelRect r =
                box_pixel_rect(box, gm.values.shape.dim[0], gm.values.shape.dim[1]);
            double acc = 0.0;
            int count = 0;
            for (int y = r.y0; y < r.y1; ++y) {
                for (int x = r.x0; x < r.x1; ++x) {
                    acc += gm.values.data[static_cast<std::size_t>(y * gm.values.shape.dim[1] + x)];
                    ++count;
                }
            }
            Row row;
            row.image_id = id;
            row.box = box;
            row.correct = correct;
            row.has_mean = count > 0;
            row.mean = count > 0 ? acc / count : 0.0;
            rows[static_cast<std::size_t>(i)].push_back(std::move(row));
        };
        for (const DetectionBox& box : rep.correct) add(box, true);
        for (const DetectionBox& box : rep.incorrect) add(box, false);
    });

    CorrelationResult out{std::nullopt, std::nullopt, 0, 0,
                          CsvTable({"image-id", "label", "x", "y", "w", "h", "confidence",
                                    "correct", "mean-gradient"})};
    double sum_correct = 0.0;
    double sum_incorrect = 0.0;
    int meaned_correct = 0;
    int meaned_incorrect = 0;
    for (const std::vector<Row>& scene_rows : rows) {
        for (const Row& row : scene_rows) {
            out.boxes.add_row({row.image_id, std::to_string(row.box.label), fmt_float(row.box.x),
                               fmt_float(row.box.y), fmt_float(row.box.w), fmt_float(row.box.h),
                               fmt_float(row.box.confidence), row.correct ? "1" : "0",
                               row.has_mean ? fmt_float(row.mean) : ""});
            if (row.correct) {
                ++out.n_correct;
                if (row.has_mean) {
                    sum_correct += row.mean;
                    ++meaned_correct;
                }
            } else {
                ++out.n_incorrect;
                if (row.has_mean) {
                    sum_incorrect += row.mean;
                    ++meaned_incorrect;
                }
            }
        }
    }
    if (meaned_correct > 0) out.mean_correct = sum_correct / meaned_correct;
    if (meaned_incorrect > 0) out.mean_incorrect = sum_incorrect / meaned_incorrect;
    return out;
}

}  // namespace flowlens
