// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include "flowlens/camsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowlens/container.hpp"
#include "flowlens/rng.hpp"
#include "json.hpp"

namespace flowlens {

namespace {

constexpr char kSceneMagic[] = "SCENE001";
constexpr std::uint32_t kSceneVersion = 1;

constexpr float kVisibilityMargin = 0.08f;
constexpr int kVisibilityRounds = 30;
constexpr int kCellCount = 3;

// Object albedo per class: disc, square, triangle, ring.
constexpr float kObjectColor[kObjectClassCount][3] = {
        {0.55f, 0.08f, 0.06f},
        {0.15f, 1.00f, 0.15f},
        {0.08f, 0.15f, 0.85f},
        {1.00f, 0.88f, 0.15f},
};

struct PresetConfig {
    float background;
    float texture_amp;
    float object_scale;
    bool soft_light;
    bool main_light;
};

PresetConfig preset_config(ScenePreset preset) {
    switch (preset) {
        case ScenePreset::Nominal:
            return {0.48f, 0.12f, 1.0f, true, false};
        case ScenePreset::BrightLight:
            return {0.15f, 0.12f, 1.6f, false, true};
        case ScenePreset::LowLight:
            return {0.045f, 0.12f, 0.1f, false, false};
    }
    throw std::invalid_argument("unknown scene preset");
}

// Shape membership in unit box coordinates, (fu, fv) in [0, 1).
bool shape_covers(int label, float fu, float fv) {
    const float du = fu - 0.5f;
    const float dv = fv - 0.5f;
    switch (label) {
        case 0:
            return du * du + dv * dv <= 0.25f;
        case 1:
            return true;
        case 2:
            return std::fabs(du) <= 0.5f * fv;
        case 3: {
            const float r2 = du * du + dv * dv;
            return r2 <= 0.25f && r2 >= 0.28f * 0.28f;
        }
        default:
            return false;
    }
}

Tensor<float> make_base_radiance(const PresetConfig& cfg, Rng& rng) {
    const int s = kSceneSize;
    Tensor<float> base(Shape{s, s, 3});
    const float fx = static_cast<float>(1 + rng.below(3));
    const float fy = static_cast<float>(1 + rng.below(3));
    const float fd = static_cast<float>(1 + rng.below(2));
    const float p1 = static_cast<float>(rng.uniform(0.0, 6.2831853));
    const float p2 = static_cast<float>(rng.uniform(0.0, 6.2831853));
    const float p3 = static_cast<float>(rng.uniform(0.0, 6.2831853));
    const float tau = 6.2831853f;
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const float u = static_cast<float>(x) / s;
            const float v = static_cast<float>(y) / s;
            float t = 0.6f * std::sin(tau * fx * u + p1) * std::sin(tau * fy * v + p2) +
                                0.4f * std::sin(tau * fd * (u + v) + p3);
            t += static_cast<float>(rng.uniform(-0.35, 0.35));
            const float val = cfg.background * (1.0f + cfg.texture_amp * t);
            for (int c = 0; c < 3; ++c) base.at3(y, x, c) = std::max(val, 0.0f);
        }
    }
    return base;
}

void draw_objects(Tensor<float>& radiance, const std::vector<SceneObject>& objects,
                  float object_scale) {
    for (const SceneObject& obj : objects) {
        for (int py = obj.y; py < obj.y + obj.h; ++py) {
            for (int px = obj.x; px < obj.x + obj.w; ++px) {
                const float fu = (static_cast<float>(px) + 0.5f - obj.x) / obj.w;
                const float fv = (static_cast<float>(py) + 0.5f - obj.y) / obj.h;
                if (!shape_covers(obj.label, fu, fv)) continue;
                for (int c = 0; c < 3; ++c)
                    radiance.at3(py, px, c) = kObjectColor[obj.label][c] * object_scale;
            }
        }
    }
}

void add_lights(Tensor<float>& radiance, const std::vector<SceneLight>& lights) {
    for (const SceneLight& light : lights) {
        const float inv = 1.0f / (2.0f * light.radius * light.radius);
        for (int y = 0; y < kSceneSize; ++y) {
            for (int x = 0; x < kSceneSize; ++x) {
                const float dx = static_cast<float>(x) + 0.5f - light.x;
                const float dy = static_cast<float>(y) + 0.5f - light.y;
                const float add = light.intensity * std::exp(-(dx * dx + dy * dy) * inv);
                for (int c = 0; c < 3; ++c) radiance.at3(y, x, c) += add;
            }
        }
    }
}

void compose_radiance(Scene& scene, const Tensor<float>& base, float object_scale) {
    scene.radiance = base;
    draw_objects(scene.radiance, scene.objects, object_scale);
    add_lights(scene.radiance, scene.lights);
}

// An object counts as visible when the luma of its shape pixels differs from
// the luma of a 2-pixel ring around its box by at least the margin, in the
// capture of at least one probe setting.
std::vector<bool> visible_flags(const Scene& scene) {
    std::vector<bool> visible(scene.objects.size(), false);
    for (const CameraParams& probe : visibility_probes()) {
        if (std::all_of(visible.begin(), visible.end(), [](bool v) { return v; })) break;
        const Image img = capture(scene, probe, 0);
        for (std::size_t i = 0; i < scene.objects.size(); ++i) {
            if (visible[i]) continue;
            const SceneObject& obj = scene.objects[i];
            const float factor = static_cast<float>(kSceneSize) / kCaptureSize;
            const float bx = obj.x / factor;
            const float by = obj.y / factor;
            const float bw = obj.w / factor;
            const float bh = obj.h / factor;
            double obj_sum = 0.0, ring_sum = 0.0;
            int obj_n = 0, ring_n = 0;
            const int y0 = std::max(0, static_cast<int>(std::floor(by)) - 2);
            const int y1 = std::min(kCaptureSize, static_cast<int>(std::ceil(by + bh)) + 2);
            const int x0 = std::max(0, static_cast<int>(std::floor(bx)) - 2);
            const int x1 = std::min(kCaptureSize, static_cast<int>(std::ceil(bx + bw)) + 2);
            for (int py = y0; py < y1; ++py) {
                for (int px = x0; px < x1; ++px) {
                    const float cy = static_cast<float>(py) + 0.5f;
                    const float cx = static_cast<float>(px) + 0.5f;
                    const float l = luma(img.at3(py, px, 0), img.at3(py, px, 1), img.at3(py, px, 2));
                    const bool in_box = cx >= bx && cx < bx + bw && cy >= by && cy < by + bh;
                    if (in_box) {
                        const float fu = (cx - bx) / bw;
                        const float fv = (cy - by) / bh;
                        if (shape_covers(obj.label, fu, fv)) {
                            obj_sum += l;
                            ++obj_n;
                        }
                    } else {
                        ring_sum += l;
                        ++ring_n;
                    }
                }
            }
            if (obj_n == 0 || ring_n == 0) continue;
            const double diff = std::fabs(obj_sum / obj_n - ring_sum / ring_n);
            if (diff >= kVisibilityMargin) visible[i] = true;
        }
    }
    return visible;
}

int place_in_cell(Rng& rng, int cell, int size) {
    const int cell_w = kSceneSize / kCellCount;
    const int slack = cell_w - size - 4;
    return cell * cell_w + 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(slack) + 1));
}

}  // namespace

ScenePreset parse_preset(const std::string& name) {
    if (name == "nominal") return ScenePreset::Nominal;
    if (name == "bright-light") return ScenePreset::BrightLight;
    if (name == "low-light") return ScenePreset::LowLight;
    throw std::invalid_argument("unknown scene preset \"" + name +
                                "\" (expected nominal, bright-light, or low-light)");
}

std::string preset_name(ScenePreset preset) {
    switch (preset) {
        case ScenePreset::Nominal:
            return "nominal";
        case ScenePreset::BrightLight:
            return "bright-light";
        case ScenePreset::LowLight:
            return "low-light";
    }
    throw std::invalid_argument("unknown scene preset");
}

CameraParams::CameraParams(float backlight_compensation_in, float brightness_in, float contrast_in,
                           float exposure_in, float gain_in, float saturation_in,
                           float sharpness_in) {
    const auto& r = ranges();
    backlight_compensation = std::clamp(backlight_compensation_in, r[0].lo, r[0].hi);
    brightness = std::clamp(brightness_in, r[1].lo, r[1].hi);
    contrast = std::clamp(contrast_in, r[2].lo, r[2].hi);
    exposure = std::clamp(exposure_in, r[3].lo, r[3].hi);
    gain = std::clamp(gain_in, r[4].lo, r[4].hi);
    saturation = std::clamp(saturation_in, r[5].lo, r[5].hi);
    sharpness = std::clamp(sharpness_in, r[6].lo, r[6].hi);
}

const std::array<CameraParams::Range, 7>& CameraParams::ranges() {
    static const std::array<Range, 7> table = {{
            {"backlight_compensation", 0.0f, 1.0f},
            {"brightness", -0.5f, 0.5f},
            {"contrast", 0.25f, 4.0f},
            {"exposure", -3.0f, 3.0f},
            {"gain", 1.0f, 8.0f},
            {"saturation", 0.0f, 2.0f},
            {"sharpness", 0.0f, 2.0f},
    }};
    return table;
}

std::array<float, 7> CameraParams::to_array() const {
    return {backlight_compensation, brightness, contrast, exposure, gain, saturation, sharpness};
}

CameraParams CameraParams::from_array(const std::array<float, 7>& v) {
    return CameraParams(v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
}

const char* object_class_name(int label) {
    switch (label) {
        case 0: return "disc";
        case 1: return "square";
        case 2: return "triangle";
        case 3: return "ring";
        default: throw std::invalid_argument("unknown object class " + std::to_string(label));
    }
}

int Scene::dominant_label() const {
    if (objects.empty()) throw std::logic_error("scene has no objects");
    const SceneObject* best = &objects[0];
    for (const SceneObject& obj : objects)
        if (obj.w * obj.h > best->w * best->h) best = &obj;
    return best->label;
}

Scene generate_scene(ScenePreset preset, std::uint64_t seed) {
    const PresetConfig cfg = preset_config(preset);
    Rng rng(mix_seed(seed, 0x7363656eULL));

    Scene scene;
    scene.preset = preset;
    scene.seed = seed;

    const Tensor<float> base = make_base_radiance(cfg, rng);

    if (cfg.soft_light) {
        const float sx = static_cast<float>(rng.uniform(20.0, 76.0));
        const float sy = static_cast<float>(rng.uniform(20.0, 76.0));
        scene.lights.push_back({sx, sy, 28.0f, 0.22f});
    }
    if (cfg.main_light) {
        const float mx = static_cast<float>(rng.uniform(40.0, 56.0));
        const float my = static_cast<float>(rng.uniform(40.0, 56.0));
        scene.lights.push_back({mx, my, 9.0f, 10.0f});
    }

    const int n_objects = 4 + static_cast<int>(rng.below(5));
    std::vector<int> cells(kCellCount * kCellCount);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    rng.shuffle(cells);

    std::vector<int> obj_cell(cells.begin(), cells.begin() + n_objects);
    std::vector<int> free_cells(cells.begin() + n_objects, cells.end());

    scene.objects.resize(n_objects);
    for (int i = 0; i < n_objects; ++i) {
        SceneObject& obj = scene.objects[i];
        obj.label = static_cast<int>(rng.below(kObjectClassCount));
        obj.w = obj.h = 18 + static_cast<int>(rng.below(7));
        obj.x = place_in_cell(rng, obj_cell[i] % kCellCount, obj.w);
        obj.y = place_in_cell(rng, obj_cell[i] / kCellCount, obj.h);
    }

    for (int round = 0; round < kVisibilityRounds; ++round) {
        compose_radiance(scene, base, cfg.object_scale);
        const std::vector<bool> visible = visible_flags(scene);
        bool all = true;
        for (int i = 0; i < n_objects; ++i) {
            if (visible[i]) continue;
            all = false;
            SceneObject& obj = scene.objects[i];
            if (!free_cells.empty()) {
                const std::size_t pick = rng.below(free_cells.size());
                std::swap(obj_cell[i], free_cells[pick]);
            }
            obj.x = place_in_cell(rng, obj_cell[i] % kCellCount, obj.w);
            obj.y = place_in_cell(rng, obj_cell[i] / kCellCount, obj.h);
        }
        if (all) return scene;
    }
    throw std::runtime_error("scene generation failed: objects stayed invisible after " +
                             std::to_string(kVisibilityRounds) + " rounds (preset " +
                             preset_name(preset) + ", seed " + std::to_string(seed) + ")");
}

Scene generate_scene(const std::string& preset, std::uint64_t seed) {
    return generate_scene(parse_preset(preset), seed);
}

Image gaussian_blur3x3(const Image& img) {
    const int h = img.shape.dim[0];
    const int w = img.shape.dim[1];
    const int c = img.shape.dim[2];
    Image tmp(img.shape);
    Image out(img.shape);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int xl = std::max(x - 1, 0);
            const int xr = std::min(x + 1, w - 1);
            for (int k = 0; k < c; ++k)
                tmp.at3(y, x, k) =
                        0.25f * (img.at3(y, xl, k) + 2.0f * img.at3(y, x, k) + img.at3(y, xr, k));
        }
    }
    for (int y = 0; y < h; ++y) {
        const int yu = std::max(y - 1, 0);
        const int yd = std::min(y + 1, h - 1);
        for (int x = 0; x < w; ++x) {
            for (int k = 0; k < c; ++k)
                out.at3(y, x, k) =
                        0.25f * (tmp.at3(yu, x, k) + 2.0f * tmp.at3(y, x, k) + tmp.at3(yd, x, k));
        }
    }
    return out;
}

Image render(const Scene& scene, const CameraParams& params, std::uint64_t noise_seed) {
    if (scene.radiance.shape != Shape{kSceneSize, kSceneSize, 3})
        throw std::invalid_argument("scene radiance must be " + std::to_string(kSceneSize) + "x" +
                                    std::to_string(kSceneSize) + "x3");

    const std::size_t n = scene.radiance.data.size();
    Image img(scene.radiance.shape);
    const float* src = scene.radiance.ptr();
    float* dst = img.ptr();

    const float scale = std::exp2(params.exposure) * params.gain;
    for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] * scale;

    if (noise_seed != 0) {
        Rng noise(mix_seed(noise_seed, 0x6e6f6973ULL));
        const float sigma = 0.002f * params.gain;
        for (std::size_t i = 0; i < n; ++i) dst[i] += sigma * static_cast<float>(noise.normal());
    }

    if (params.backlight_compensation > 0.0f) {
        const float e = 1.0f / (1.0f + params.backlight_compensation);
        for (std::size_t i = 0; i < n; ++i) dst[i] = std::pow(std::max(dst[i], 0.0f), e);
    }

    for (std::size_t i = 0; i < n; ++i) dst[i] = clamp01(dst[i]);

    if (params.brightness != 0.0f)
        for (std::size_t i = 0; i < n; ++i) dst[i] += params.brightness;

    if (params.contrast != 1.0f)
        for (std::size_t i = 0; i < n; ++i) dst[i] = (dst[i] - 0.5f) * params.contrast + 0.5f;

    if (params.saturation != 1.0f) {
        for (std::size_t i = 0; i < n; i += 3) {
            const float y = luma(dst[i], dst[i + 1], dst[i + 2]);
            for (int c = 0; c < 3; ++c) dst[i + c] = y + params.saturation * (dst[i + c] - y);
        }
    }

    if (params.sharpness > 0.0f) {
        const Image blur = gaussian_blur3x3(img);
        const float* b = blur.ptr();
        for (std::size_t i = 0; i < n; ++i) dst[i] += params.sharpness * (dst[i] - b[i]);
    }

    for (std::size_t i = 0; i < n; ++i) dst[i] = clamp01(dst[i]);
    return img;
}

Image capture(const Scene& scene, const CameraParams& params, std::uint64_t noise_seed) {
    return area_resize(render(scene, params, noise_seed), kCaptureSize, kCaptureSize);
}

const std::array<CameraParams, 32>& visibility_probes() {
    static const std::array<CameraParams, 32> probes = [] {
        std::array<CameraParams, 32> p{};
        const float exposures[4] = {-3.0f, -1.5f, 0.0f, 1.5f};
        const float gains[2] = {1.0f, 8.0f};
        const float brightnesses[2] = {0.0f, 0.25f};
        const float contrasts[2] = {1.0f, 2.0f};
        int i = 0;
        for (float ex : exposures)
            for (float g : gains)
                for (float br : brightnesses)
                    for (float ct : contrasts) p[i++] = CameraParams(0.0f, br, ct, ex, g, 1.0f, 0.0f);
        return p;
    }();
    return probes;
}

SceneObject scaled_to_capture(const SceneObject& obj) {
    const float factor = static_cast<float>(kSceneSize) / kCaptureSize;
    SceneObject out;
    out.label = obj.label;
    out.x = static_cast<int>(std::lround(obj.x / factor));
    out.y = static_cast<int>(std::lround(obj.y / factor));
    out.w = std::max(1, static_cast<int>(std::lround(obj.w / factor)));
    out.h = std::max(1, static_cast<int>(std::lround(obj.h / factor)));
    return out;
}

std::vector<std::uint8_t> scene_to_bytes(const Scene& scene) {
    nlohmann::json header;
    header["version"] = kSceneVersion;
    header["height"] = kSceneSize;
    header["width"] = kSceneSize;
    header["preset"] = preset_name(scene.preset);
    header["seed"] = scene.seed;
    nlohmann::json objects = nlohmann::json::array();
    for (const SceneObject& obj : scene.objects) {
        objects.push_back({{"label", obj.label}, {"x", obj.x}, {"y", obj.y}, {"w", obj.w}, {"h", obj.h}});
    }
    header["objects"] = objects;
    nlohmann::json lights = nlohmann::json::array();
    for (const SceneLight& light : scene.lights) {
        lights.push_back({{"x", light.x},
                          {"y", light.y},
                          {"radius", light.radius},
                          {"intensity", light.intensity}});
    }
    header["lights"] = lights;

    ContainerWriter writer(kSceneMagic);
    writer.header() = header;
    writer.add_f32({scene.radiance.ptr(), scene.radiance.data.size()});
    return writer.finish();
}

Scene scene_from_bytes(const std::vector<std::uint8_t>& bytes) {
    ContainerReader reader(bytes, kSceneMagic);
    const nlohmann::json& header = reader.header();
    if (header.at("version").get<std::uint32_t>() != kSceneVersion)
        throw std::runtime_error("unsupported scene version");
    if (header.at("height").get<int>() != kSceneSize || header.at("width").get<int>() != kSceneSize)
        throw std::runtime_error("unsupported scene dimensions");

    Scene scene;
    scene.preset = parse_preset(header.at("preset").get<std::string>());
    scene.seed = header.at("seed").get<std::uint64_t>();
    for (const nlohmann::json& obj : header.at("objects")) {
        scene.objects.push_back({obj.at("label").get<int>(), obj.at("x").get<int>(),
                                 obj.at("y").get<int>(), obj.at("w").get<int>(),
                                 obj.at("h").get<int>()});
    }
    for (const nlohmann::json& light : header.at("lights")) {
        scene.lights.push_back({light.at("x").get<float>(), light.at("y").get<float>(),
                                light.at("radius").get<float>(), light.at("intensity").get<float>()});
    }
    const std::vector<float> radiance = reader.read_f32(std::size_t{kSceneSize} * kSceneSize * 3);
    reader.expect_end();
    scene.radiance = Tensor<float>(Shape{kSceneSize, kSceneSize, 3}, radiance);
    return scene;
}

void save_scene(const Scene& scene, const std::string& path) {
    write_file_bytes(path, scene_to_bytes(scene));
}

Scene load_scene(const std::string& path) { return scene_from_bytes(read_file_bytes(path)); }

}  // namespace flowlens
