// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic CSV output: floats are printed with std::to_chars shortest
// round-trip form, so identical values give identical bytes on any platform.

#ifndef FLOWLENS_CSV_HPP
#define FLOWLENS_CSV_HPP

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowlens {

inline std::string fmt_float(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    if (res.ec != std::errc()) throw std::runtime_error("float formatting failed");
    return std::string(buf, res.ptr);
}

inline std::string fmt_float(float v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    if (res.ec != std::errc()) throw std::runtime_error("float formatting failed");
    return std::string(buf, res.ptr);
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void add_row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_.size())
            throw std::invalid_argument("csv row has " + std::to_string(cells.size()) +
                                        " cells, expected " + std::to_string(columns_.size()));
        rows_.push_back(cells);
    }

    std::string dump() const {
        std::string out;
        for (std::size_t i = 0; i < columns_.size(); ++i) {
            if (i) out += ',';
            out += csv_escape(columns_[i]);
        }
        out += '\n';
        for (const auto& row : rows_) {
            for (std::size_t i = 0; i < row.size(); ++i) {
                if (i) out += ',';
                out += csv_escape(row[i]);
            }
            out += '\n';
        }
        return out;
    }

    std::size_t row_count() const { return rows_.size(); }

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<std::string>> rows_;
};

}  // namespace flowlens

#endif
