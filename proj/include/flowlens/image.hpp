// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOWLENS_IMAGE_HPP
#define FLOWLENS_IMAGE_HPP

#include <string>

#include "flowlens/tensor.hpp"

namespace flowlens {

// Images are rank-3 tensors {H, W, C} with float values in [0, 1].
using Image = Tensor<float>;

// Side length of camera captures and extractor inputs.
inline constexpr int kCaptureSize = 32;

inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

// Rec. 601 luma of an RGB pixel.
inline float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

float mean_luma(const Image& img);

// Area-average downscale; both dimensions must shrink by the same integer
// factor.
Image area_resize(const Image& img, int out_h, int out_w);

// Binary 8-bit PPM (P6, maxval 255); values are clamped and rounded.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// Single-channel map exported as 16-bit big-endian PGM (P5, maxval 65535),
// linearly rescaled to the full range. A JSON sidecar at path + ".json"
// records the original min/max so values can be recovered.
void write_pgm16_scaled(const std::string& path, const Tensor<float>& map);

}  // namespace flowlens

#endif
