// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Binary container shared by checkpoints and scene files: an 8-byte magic,
// a u32 little-endian header length, a UTF-8 JSON header, then raw
// little-endian f32 arrays. Readers validate magic and header length and
// reject trailing or missing bytes.

#ifndef FLOWLENS_CONTAINER_HPP
#define FLOWLENS_CONTAINER_HPP

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace flowlens {

class ContainerWriter {
public:
    explicit ContainerWriter(const std::string& magic) {
        if (magic.size() != 8) throw std::invalid_argument("container magic must be 8 bytes");
        magic_ = magic;
    }

    nlohmann::ordered_json& header() { return header_; }

    void add_f32(std::span<const float> values) {
        const std::size_t off = blob_.size();
        blob_.resize(off + values.size() * 4);
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, &values[i], 4);
            blob_[off + i * 4 + 0] = static_cast<std::uint8_t>(bits & 0xff);
            blob_[off + i * 4 + 1] = static_cast<std::uint8_t>((bits >> 8) & 0xff);
            blob_[off + i * 4 + 2] = static_cast<std::uint8_t>((bits >> 16) & 0xff);
            blob_[off + i * 4 + 3] = static_cast<std::uint8_t>((bits >> 24) & 0xff);
        }
    }

    std::vector<std::uint8_t> finish() const {
        const std::string hdr = header_.dump();
        if (hdr.size() > 0xffffffffull) throw std::length_error("container header too large");
        std::vector<std::uint8_t> out;
        out.reserve(12 + hdr.size() + blob_.size());
        out.insert(out.end(), magic_.begin(), magic_.end());
        const std::uint32_t n = static_cast<std::uint32_t>(hdr.size());
        out.push_back(static_cast<std::uint8_t>(n & 0xff));
        out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
        out.push_back(static_cast<std::uint8_t>((n >> 16) & 0xff));
        out.push_back(static_cast<std::uint8_t>((n >> 24) & 0xff));
        out.insert(out.end(), hdr.begin(), hdr.end());
        out.insert(out.end(), blob_.begin(), blob_.end());
        return out;
    }

private:
    std::string magic_;
    nlohmann::ordered_json header_ = nlohmann::ordered_json::object();
    std::vector<std::uint8_t> blob_;
};

class ContainerReader {
public:
    ContainerReader(std::span<const std::uint8_t> bytes, const std::string& expected_magic) {
        if (expected_magic.size() != 8) throw std::invalid_argument("container magic must be 8 bytes");
        if (bytes.size() < 12) throw std::runtime_error("container truncated: " + std::to_string(bytes.size()) + " bytes");
        std::string magic(bytes.begin(), bytes.begin() + 8);
        if (magic != expected_magic)
            throw std::runtime_error("bad container magic \"" + printable(magic) + "\", expected \"" +
                                     expected_magic + "\"");
        const std::uint32_t hdr_len = static_cast<std::uint32_t>(bytes[8]) |
                                      (static_cast<std::uint32_t>(bytes[9]) << 8) |
                                      (static_cast<std::uint32_t>(bytes[10]) << 16) |
                                      (static_cast<std::uint32_t>(bytes[11]) << 24);
        if (bytes.size() < 12 + static_cast<std::size_t>(hdr_len))
            throw std::runtime_error("container header truncated");
        const char* hp = reinterpret_cast<const char*>(bytes.data()) + 12;
        header_ = nlohmann::json::parse(hp, hp + hdr_len);
        blob_ = bytes.subspan(12 + hdr_len);
    }

    const nlohmann::json& header() const { return header_; }

    std::vector<float> read_f32(std::size_t count) {
        if (pos_ + count * 4 > blob_.size())
            throw std::runtime_error("container blob truncated: need " + std::to_string(count * 4) +
                                     " bytes at offset " + std::to_string(pos_));
        std::vector<float> out(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint8_t* p = blob_.data() + pos_ + i * 4;
            std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                                 (static_cast<std::uint32_t>(p[1]) << 8) |
                                 (static_cast<std::uint32_t>(p[2]) << 16) |
                                 (static_cast<std::uint32_t>(p[3]) << 24);
            std::memcpy(&out[i], &bits, 4);
        }
        pos_ += count * 4;
        return out;
    }

    void expect_end() const {
        if (pos_ != blob_.size())
            throw std::runtime_error("container has " + std::to_string(blob_.size() - pos_) +
                                     " trailing bytes");
    }

private:
    static std::string printable(const std::string& s) {
        std::string out;
        for (unsigned char c : s) out += (c >= 32 && c < 127) ? static_cast<char>(c) : '?';
        return out;
    }

    nlohmann::json header_;
    std::span<const std::uint8_t> blob_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);
void write_file_text(const std::string& path, const std::string& text);
std::string read_file_text(const std::string& path);

}  // namespace flowlens

#endif
