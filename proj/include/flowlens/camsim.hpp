// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOWLENS_CAMSIM_HPP
#define FLOWLENS_CAMSIM_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "flowlens/image.hpp"
#include "flowlens/tensor.hpp"

namespace flowlens {

inline constexpr int kSceneSize = 96;
inline constexpr int kObjectClassCount = 4;

enum class ScenePreset { Nominal, BrightLight, LowLight };

ScenePreset parse_preset(const std::string& name);
std::string preset_name(ScenePreset preset);

// Display name of an object class label: disc, square, triangle, ring.
const char* object_class_name(int label);

struct CameraParams {
    float backlight_compensation = 0.0f;
    float brightness = 0.0f;
    float contrast = 1.0f;
    float exposure = 0.0f;
    float gain = 1.0f;
    float saturation = 1.0f;
    float sharpness = 0.0f;

    CameraParams() = default;
    CameraParams(float backlight_compensation_in, float brightness_in, float contrast_in,
                 float exposure_in, float gain_in, float saturation_in, float sharpness_in);

    static CameraParams defaults() { return CameraParams(0.0f, 0.0f, 1.0f, 0.0f, 1.0f, 1.0f, 0.0f); }

    struct Range {
        const char* name;
        float lo;
        float hi;
    };
    static const std::array<Range, 7>& ranges();

    std::array<float, 7> to_array() const;
    static CameraParams from_array(const std::array<float, 7>& v);
};

struct SceneObject {
    int label = 0;
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;
};

struct SceneLight {
    float x = 0.0f;
    float y = 0.0f;
    float radius = 1.0f;
    float intensity = 0.0f;
};

struct Scene {
    ScenePreset preset = ScenePreset::Nominal;
    std::uint64_t seed = 0;
    Tensor<float> radiance;
    std::vector<SceneObject> objects;
    std::vector<SceneLight> lights;

    int dominant_label() const;
};

Scene generate_scene(ScenePreset preset, std::uint64_t seed);
Scene generate_scene(const std::string& preset, std::uint64_t seed);

Image render(const Scene& scene, const CameraParams& params, std::uint64_t noise_seed);
Image capture(const Scene& scene, const CameraParams& params, std::uint64_t noise_seed);

const std::array<CameraParams, 32>& visibility_probes();

SceneObject scaled_to_capture(const SceneObject& obj);

Image gaussian_blur3x3(const Image& img);

std::vector<std::uint8_t> scene_to_bytes(const Scene& scene);
Scene scene_from_bytes(const std::vector<std::uint8_t>& bytes);
void save_scene(const Scene& scene, const std::string& path);
Scene load_scene(const std::string& path);

}  // namespace flowlens

#endif
