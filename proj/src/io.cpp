// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "flowlens/container.hpp"
#include "flowlens/csv.hpp"
#include "flowlens/image.hpp"

namespace flowlens {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + path);
}

void write_file_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::span<const std::uint8_t>(
                               reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_file_text(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

float mean_luma(const Image& img) {
    if (img.shape.rank != 3 || img.shape.dim[2] != 3)
        throw std::invalid_argument("mean_luma expects an RGB image, got " + img.shape.str());
    double acc = 0.0;
    const std::size_t n = static_cast<std::size_t>(img.shape.dim[0]) * img.shape.dim[1];
    for (std::size_t i = 0; i < n; ++i)
        acc += luma(img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]);
    return static_cast<float>(acc / static_cast<double>(n));
}

Image area_resize(const Image& img, int out_h, int out_w) {
    if (img.shape.rank != 3) throw std::invalid_argument("area_resize expects a rank-3 image");
    const int h = img.shape.dim[0], w = img.shape.dim[1], c = img.shape.dim[2];
    if (out_h <= 0 || out_w <= 0 || h % out_h != 0 || w % out_w != 0 || h / out_h != w / out_w)
        throw std::invalid_argument("area_resize: " + img.shape.str() + " -> " +
                                    std::to_string(out_h) + "x" + std::to_string(out_w) +
                                    " is not an integer downscale");
    const int f = h / out_h;
    const float inv = 1.0f / static_cast<float>(f * f);
    Image out(Shape{out_h, out_w, c});
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                float acc = 0.0f;
                for (int dy = 0; dy < f; ++dy)
                    for (int dx = 0; dx < f; ++dx) acc += img.at3(y * f + dy, x * f + dx, ch);
                out.at3(y, x, ch) = acc * inv;
            }
    return out;
}

void write_ppm(const std::string& path, const Image& img) {
    if (img.shape.rank != 3 || img.shape.dim[2] != 3)
        throw std::invalid_argument("write_ppm expects an RGB image, got " + img.shape.str());
    const int h = img.shape.dim[0], w = img.shape.dim[1];
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<std::size_t>(h) * w * 3);
    for (float v : img.data) {
        const long q = std::lround(static_cast<double>(clamp01(v)) * 255.0);
        out += static_cast<char>(std::clamp(q, 0l, 255l));
    }
    write_file_text(path, out);
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
        throw std::runtime_error(path + " is not an 8-bit P6 PPM");
    f.get();
    std::vector<char> raw(static_cast<std::size_t>(w) * h * 3);
    f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!f) throw std::runtime_error(path + " truncated");
    Image img(Shape{h, w, 3});
    for (std::size_t i = 0; i < raw.size(); ++i)
        img.data[i] = static_cast<float>(static_cast<unsigned char>(raw[i])) / 255.0f;
    return img;
}

void write_pgm16_scaled(const std::string& path, const Tensor<float>& map) {
    if (map.shape.rank != 2) throw std::invalid_argument("write_pgm16_scaled expects a rank-2 map");
    const int h = map.shape.dim[0], w = map.shape.dim[1];
    float lo = std::numeric_limits<float>::infinity(), hi = -lo;
    for (float v : map.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = static_cast<double>(hi) - static_cast<double>(lo);
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
    for (float v : map.data) {
        const double t = range > 0.0 ? (static_cast<double>(v) - lo) / range : 0.0;
        const long q = std::clamp(std::lround(t * 65535.0), 0l, 65535l);
        out += static_cast<char>((q >> 8) & 0xff);
        out += static_cast<char>(q & 0xff);
    }
    write_file_text(path, out);

    nlohmann::ordered_json side;
    side["height"] = h;
    side["width"] = w;
    side["min"] = nlohmann::json::parse(fmt_float(lo));
    side["max"] = nlohmann::json::parse(fmt_float(hi));
    write_file_text(path + ".json", side.dump(2) + "\n");
}

}  // namespace flowlens
