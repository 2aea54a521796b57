// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include "flowlens/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include <json.hpp>

#include "flowlens/container.hpp"
#include "flowlens/rng.hpp"

namespace flowlens {

namespace {

constexpr const char* kFeatureMagic = "FECKPT01";
constexpr int kFeatureVersion = 1;

void fill_uniform(std::vector<float>& w, std::size_t n, int fan_in, Rng& rng) {
    w.resize(n);
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    for (auto& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
}

void check_capture_shape(const Image& img, const char* where, int index = -1) {
    if (img.shape != Shape{kCaptureSize, kCaptureSize, 3}) {
        std::string msg = std::string(where) + ": expected a " +
                          Shape{kCaptureSize, kCaptureSize, 3}.str() + " image, got " +
                          img.shape.str();
        if (index >= 0) msg += " at index " + std::to_string(index);
        throw std::invalid_argument(msg);
    }
}

}  // namespace

FeatureExtractor make_feature_extractor(int dim, std::uint64_t seed) {
    if (dim < 1) throw std::invalid_argument("feature dim must be positive");
    FeatureExtractor fx;
    fx.dim = dim;
    Rng rng(mix_seed(seed, 0x66656174));
    fill_uniform(fx.k1, 8 * 3 * 9, 3 * 9, rng);
    fill_uniform(fx.b1, 8, 3 * 9, rng);
    fill_uniform(fx.k2, 16 * 8 * 9, 8 * 9, rng);
    fill_uniform(fx.b2, 16, 8 * 9, rng);
    fill_uniform(fx.w, static_cast<std::size_t>(dim) * 16, 16, rng);
    fill_uniform(fx.b, static_cast<std::size_t>(dim), 16, rng);
    return fx;
}

ExtractionResult extract_with_backbone(const FeatureExtractor& fx, const Image& img) {
    check_capture_shape(img, "extract");
    Tape<float> tape;
    const auto graph = build_feature_graph(tape, fx, tape.leaf(img));
    return ExtractionResult{tape.value(graph.features).data, tape.value(graph.backbone)};
}

std::vector<float> extract(const FeatureExtractor& fx, const Image& img) {
    return extract_with_backbone(fx, img).features;
}

FeatureExtractor train_features(const LabeledImages& data, const FeatureTrainConfig& config) {
    const int n = static_cast<int>(data.images.size());
    if (n < 1) throw std::invalid_argument("train_features: empty dataset");
    if (data.labels.size() != data.images.size())
        throw std::invalid_argument("train_features: " + std::to_string(data.images.size()) +
                                    " images but " + std::to_string(data.labels.size()) + " labels");
    if (config.epochs < 0) throw std::invalid_argument("train_features: epochs must be >= 0");
    if (config.batch_size < 1) throw std::invalid_argument("train_features: batch_size must be >= 1");
    int n_classes = 0;
    std::set<int> distinct;
    for (int i = 0; i < n; ++i) {
        check_capture_shape(data.images[static_cast<std::size_t>(i)], "train_features", i);
        const int label = data.labels[static_cast<std::size_t>(i)];
        if (label < 0)
            throw std::invalid_argument("train_features: negative label at index " + std::to_string(i));
        distinct.insert(label);
        n_classes = std::max(n_classes, label + 1);
    }
    if (distinct.size() < 2)
        throw std::invalid_argument("train_features: need at least two distinct classes, got " +
                                    std::to_string(distinct.size()));

    FeatureExtractor fx = make_feature_extractor(config.dim, config.seed);
    fx.meta.seed = config.seed;
    Rng rng(mix_seed(config.seed, 0x68656164));
    std::vector<float> wh, bh;  // classifier head, dropped on return
    fill_uniform(wh, static_cast<std::size_t>(n_classes) * config.dim, config.dim, rng);
    fill_uniform(bh, static_cast<std::size_t>(n_classes), config.dim, rng);

    std::vector<std::vector<float>*> params = {&fx.k1, &fx.b1, &fx.k2, &fx.b2,
                                               &fx.w,  &fx.b,  &wh,    &bh};
    std::vector<std::vector<float>> grads(params.size()), adam_m(params.size()), adam_v(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        adam_m[p].assign(params[p]->size(), 0.0f);
        adam_v[p].assign(params[p]->size(), 0.0f);
    }
    long adam_t = 0;
    const float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;

    Rng order_rng(mix_seed(config.seed, 0x6f726472));
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);

    auto snapshot_params = [&] {
        std::vector<std::vector<float>> snap;
        for (auto* p : params) snap.push_back(*p);
        return snap;
    };
    auto restore_params = [&](const std::vector<std::vector<float>>& snap) {
        for (std::size_t p = 0; p < params.size(); ++p) *params[p] = snap[p];
    };

    std::vector<std::vector<float>> good = snapshot_params();
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        order_rng.shuffle(perm);
        double epoch_loss = 0.0;
        for (int start = 0; start < n; start += config.batch_size) {
            const int rows = std::min(config.batch_size, n - start);
            for (auto& g : grads) g.clear();
            for (std::size_t p = 0; p < params.size(); ++p) grads[p].assign(params[p]->size(), 0.0f);
            double batch_loss = 0.0;
            for (int r = 0; r < rows; ++r) {
                const int idx = perm[static_cast<std::size_t>(start + r)];
                Tape<float> tape;
                const auto graph =
                    build_feature_graph(tape, fx, tape.leaf(data.images[static_cast<std::size_t>(idx)]));
                // Re-create head leaves on this sample's tape.
                Tensor<float> whT(Shape{n_classes, fx.dim}, wh);
                Tensor<float> bhT(Shape{n_classes}, bh);
                NodeId wh_node = tape.leaf(std::move(whT));
                NodeId bh_node = tape.leaf(std::move(bhT));
                NodeId logits = tape.add(tape.matvec(wh_node, graph.features), bh_node);
                Tensor<float> neg_onehot(Shape{n_classes});
                neg_onehot.data[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(idx)])] = -1.0f;
                NodeId diff = tape.add(logits, tape.leaf(std::move(neg_onehot)));
                NodeId loss = tape.sum(tape.mul(diff, diff));
                batch_loss += static_cast<double>(tape.value(loss).data[0]) / n_classes;

                const auto g = tape.backward(loss);
                const NodeId leaf_ids[8] = {graph.k1, graph.b1, graph.k2, graph.b2,
                                            graph.w,  graph.b,  wh_node,  bh_node};
                const float scale = 1.0f / (static_cast<float>(n_classes) * rows);
                for (std::size_t p = 0; p < 8; ++p) {
                    const auto& src = g[static_cast<std::size_t>(leaf_ids[p])].data;
                    auto& dst = grads[p];
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i] * scale;
                }
            }
            epoch_loss += batch_loss;

            ++adam_t;
            const float c1 = 1.0f - std::pow(beta1, static_cast<float>(adam_t));
            const float c2 = 1.0f - std::pow(beta2, static_cast<float>(adam_t));
            for (std::size_t p = 0; p < params.size(); ++p) {
                auto& w = *params[p];
                for (std::size_t i = 0; i < w.size(); ++i) {
                    adam_m[p][i] = beta1 * adam_m[p][i] + (1.0f - beta1) * grads[p][i];
                    adam_v[p][i] = beta2 * adam_v[p][i] + (1.0f - beta2) * grads[p][i] * grads[p][i];
                    w[i] -= config.lr * (adam_m[p][i] / c1) / (std::sqrt(adam_v[p][i] / c2) + eps);
                }
            }
        }
        epoch_loss /= n;
        if (!std::isfinite(epoch_loss)) {
            std::fprintf(stderr,
                         "train_features: non-finite loss at epoch %d, keeping epoch %d weights\n",
                         epoch + 1, epoch);
            restore_params(good);
            fx.meta.aborted = true;
            break;
        }
        fx.train_curve.push_back(static_cast<float>(epoch_loss));
        fx.meta.epochs = epoch + 1;
        fx.meta.final_loss = static_cast<float>(epoch_loss);
        good = snapshot_params();
    }
    return fx;
}

std::vector<std::uint8_t> save_feature_checkpoint(const FeatureExtractor& fx) {
    ContainerWriter w(kFeatureMagic);
    nlohmann::json hdr;
    hdr["aborted"] = fx.meta.aborted;
    hdr["curve"] = fx.train_curve;
    hdr["dim"] = fx.dim;
    hdr["epochs"] = fx.meta.epochs;
    hdr["final_loss"] = fx.meta.final_loss;
    hdr["input"] = {kCaptureSize, kCaptureSize, 3};
    hdr["seed"] = fx.meta.seed;
    hdr["version"] = kFeatureVersion;
    w.header() = hdr;
    w.add_f32(fx.k1);
    w.add_f32(fx.b1);
    w.add_f32(fx.k2);
    w.add_f32(fx.b2);
    w.add_f32(fx.w);
    w.add_f32(fx.b);
    return w.finish();
}

FeatureExtractor load_feature_checkpoint(std::span<const std::uint8_t> bytes) {
    ContainerReader r(bytes, kFeatureMagic);
    const auto& hdr = r.header();
    const int version = hdr.at("version").get<int>();
    if (version != kFeatureVersion)
        throw std::runtime_error("unsupported feature checkpoint version " + std::to_string(version));
    const auto input = hdr.at("input").get<std::vector<int>>();
    if (input != std::vector<int>{kCaptureSize, kCaptureSize, 3})
        throw std::runtime_error("feature checkpoint has unsupported input geometry");
    FeatureExtractor fx;
    fx.dim = hdr.at("dim").get<int>();
    if (fx.dim < 1) throw std::runtime_error("feature checkpoint header has invalid dim");
    fx.meta.epochs = hdr.at("epochs").get<int>();
    fx.meta.final_loss = hdr.at("final_loss").get<float>();
    fx.meta.seed = hdr.at("seed").get<std::uint64_t>();
    fx.meta.aborted = hdr.at("aborted").get<bool>();
    fx.train_curve = hdr.at("curve").get<std::vector<float>>();
    fx.k1 = r.read_f32(8 * 3 * 9);
    fx.b1 = r.read_f32(8);
    fx.k2 = r.read_f32(16 * 8 * 9);
    fx.b2 = r.read_f32(16);
    fx.w = r.read_f32(static_cast<std::size_t>(fx.dim) * 16);
    fx.b = r.read_f32(static_cast<std::size_t>(fx.dim));
    r.expect_end();
    return fx;
}

void save_feature_checkpoint_file(const FeatureExtractor& fx, const std::string& path) {
    const auto bytes = save_feature_checkpoint(fx);
    write_file_bytes(path, bytes);
}

FeatureExtractor load_feature_checkpoint_file(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return load_feature_checkpoint(bytes);
}

}  // namespace flowlens
