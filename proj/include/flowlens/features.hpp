// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Small convolutional feature extractor for 32x32 RGB captures:
//   conv3x3(3->8) + relu + avgpool2x2
//   conv3x3(8->16) + relu + avgpool2x2   (the 8x8x16 "backbone" map)
//   global average pool -> linear projection to the feature vector.
// Trained with a classification proxy (squared error against one-hot labels
// through a linear head); the head is dropped after training.

#ifndef FLOWLENS_FEATURES_HPP
#define FLOWLENS_FEATURES_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowlens/image.hpp"
#include "flowlens/tape.hpp"
#include "flowlens/tensor.hpp"

namespace flowlens {


struct FeatureTrainMeta {
    int epochs = 0;
    float final_loss = 0.0f;
    std::uint64_t seed = 0;
    bool aborted = false;
};

struct FeatureExtractor {
    int dim = 64;
    std::vector<float> k1, b1;  // {8,3,3,3}, {8}
    std::vector<float> k2, b2;  // {16,8,3,3}, {16}
    std::vector<float> w, b;    // {dim,16}, {dim}
    FeatureTrainMeta meta;
    std::vector<float> train_curve;
};

FeatureExtractor make_feature_extractor(int dim, std::uint64_t seed);

// Graph nodes of one extraction, for differentiating through the extractor.
struct FeatureGraphNodes {
    NodeId input = -1;     // {32,32,3} image leaf
    NodeId backbone = -1;  // {8,8,16} map after the second pool
    NodeId features = -1;  // {dim}
    NodeId k1 = -1, b1 = -1, k2 = -1, b2 = -1, w = -1, b = -1;
};

template <typename T>
FeatureGraphNodes build_feature_graph(Tape<T>& tape, const FeatureExtractor& fx, NodeId img) {
    if (tape.value(img).shape != Shape{kCaptureSize, kCaptureSize, 3})
        throw std::invalid_argument("build_feature_graph: expected a " +
                                    Shape{kCaptureSize, kCaptureSize, 3}.str() + " image, got " +
                                    tape.value(img).shape.str());
    auto leaf_of = [&](const std::vector<float>& v, Shape s) {
        Tensor<T> t(s);
        for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<T>(v[i]);
        return tape.leaf(std::move(t));
    };
    FeatureGraphNodes g;
    g.input = img;
    g.k1 = leaf_of(fx.k1, Shape{8, 3, 3, 3});
    g.b1 = leaf_of(fx.b1, Shape{8});
    g.k2 = leaf_of(fx.k2, Shape{16, 8, 3, 3});
    g.b2 = leaf_of(fx.b2, Shape{16});
    g.w = leaf_of(fx.w, Shape{fx.dim, 16});
    g.b = leaf_of(fx.b, Shape{fx.dim});
    NodeId c1 = tape.avgpool2x2(tape.relu(tape.conv3x3(img, g.k1, g.b1)));
    g.backbone = tape.avgpool2x2(tape.relu(tape.conv3x3(c1, g.k2, g.b2)));
    g.features = tape.add(tape.matvec(g.w, tape.global_avg_pool(g.backbone)), g.b);
    return g;
}

std::vector<float> extract(const FeatureExtractor& fx, const Image& img);

// One extraction that also returns the backbone map, so detection can reuse
// the convolution work.
struct ExtractionResult {
    std::vector<float> features;
    Tensor<float> backbone;
};
ExtractionResult extract_with_backbone(const FeatureExtractor& fx, const Image& img);

struct FeatureTrainConfig {
    int epochs = 20;
    float lr = 1e-3f;
    int batch_size = 32;
    std::uint64_t seed = 0;
    int dim = 64;
};

struct LabeledImages {
    std::vector<Image> images;
    std::vector<int> labels;
};

// Requires at least two distinct labels. Fixed seed gives bit-identical
// extractors; a non-finite epoch loss restores the previous epoch and sets
// meta.aborted.
FeatureExtractor train_features(const LabeledImages& data, const FeatureTrainConfig& config);

// Checkpoints: magic "FECKPT01" + JSON header + f32 blobs.
std::vector<std::uint8_t> save_feature_checkpoint(const FeatureExtractor& fx);
FeatureExtractor load_feature_checkpoint(std::span<const std::uint8_t> bytes);
void save_feature_checkpoint_file(const FeatureExtractor& fx, const std::string& path);
FeatureExtractor load_feature_checkpoint_file(const std::string& path);

}  // namespace flowlens

#endif
