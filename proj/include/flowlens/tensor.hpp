// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
#ifndef FLOWLENS_TENSOR_HPP
#define FLOWLENS_TENSOR_HPP

#include <array>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowlens {

// Dense shape of rank 1..4.
struct Shape {
    int rank = 0;
    std::array<int, 4> dim{1, 1, 1, 1};

    Shape() = default;
    Shape(std::initializer_list<int> dims) {
        if (dims.size() < 1 || dims.size() > 4)
            throw std::invalid_argument("Shape: rank must be 1..4");
        rank = static_cast<int>(dims.size());
        int i = 0;
        for (int d : dims) {
            if (d <= 0) throw std::invalid_argument("Shape: dimensions must be positive");
            dim[i++] = d;
        }
    }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= dim[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (dim[i] != o.dim[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << '[';
        for (int i = 0; i < rank; ++i) os << (i ? "x" : "") << dim[i];
        os << ']';
        return os.str();
    }
};

// Flat row-major dense tensor.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(s), data(static_cast<std::size_t>(s.numel()), T(0)) {}
    Tensor(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != shape.numel())
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape.str());
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, {v}); }
    static Tensor full(Shape s, T v) {
        Tensor t(s);
        for (auto& x : t.data) x = v;
        return t;
    }

    std::int64_t numel() const { return shape.numel(); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    // Rank-3 accessor (h, w, c), row-major.
    T& at3(int y, int x, int c) {
        return data[static_cast<std::size_t>((y * shape.dim[1] + x) * shape.dim[2] + c)];
    }
    T at3(int y, int x, int c) const {
        return data[static_cast<std::size_t>((y * shape.dim[1] + x) * shape.dim[2] + c)];
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

}  // namespace flowlens

#endif
