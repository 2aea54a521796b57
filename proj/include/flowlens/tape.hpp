// Copyright (c) 2026 The flowlens authors.
// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-based reverse-mode autodiff over dense tensors. The op set is
// fixed: exactly what a small conv feature extractor and an affine coupling
// flow need. Forward values are computed eagerly on record; backward walks the
// tape once in reverse. No broadcasting: elementwise ops require equal shapes.

#ifndef FLOWLENS_TAPE_HPP
#define FLOWLENS_TAPE_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowlens/tensor.hpp"

namespace flowlens {

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
    Leaf,
    MatVec,
    Conv3x3,
    Add,
    Mul,
    Exp,
    Abs,
    Tanh,
    Relu,
    AvgPool2x2,
    GlobalAvgPool,
    Slice,
    Concat,
    Sum,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::MatVec: return "matvec";
        case OpKind::Conv3x3: return "conv3x3";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Exp: return "exp";
        case OpKind::Abs: return "abs";
        case OpKind::Tanh: return "tanh";
        case OpKind::Relu: return "relu";
        case OpKind::AvgPool2x2: return "avgpool2x2";
        case OpKind::GlobalAvgPool: return "global_avg_pool";
        case OpKind::Slice: return "slice";
        case OpKind::Concat: return "concat";
        case OpKind::Sum: return "sum";
    }
    return "?";
}

// Single-writer tape. Nodes reference earlier nodes only, so recording order
// is already a topological order and backward is one reverse sweep.
template <typename T>
class Tape {
  public:
    struct Node {
        OpKind kind;
        NodeId in0 = -1, in1 = -1, in2 = -1;
        int aux0 = 0, aux1 = 0;  // slice [begin,end)
        Tensor<T> value;
    };

    NodeId leaf(Tensor<T> v) {
        nodes_.push_back(Node{OpKind::Leaf, -1, -1, -1, 0, 0, std::move(v)});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId matvec(NodeId w, NodeId x) {
        const auto& ws = shape_of(w, "matvec");
        const auto& xs = shape_of(x, "matvec");
        if (ws.rank != 2 || xs.rank != 1 || ws.dim[1] != xs.dim[0])
            fail_shapes("matvec", ws, xs);
        Tensor<T> out(Shape{ws.dim[0]});
        const T* W = value(w).ptr();
        const T* X = value(x).ptr();
        const int rows = ws.dim[0], cols = ws.dim[1];
        for (int r = 0; r < rows; ++r) {
            T acc = T(0);
            const T* wr = W + static_cast<std::size_t>(r) * cols;
            for (int c = 0; c < cols; ++c) acc += wr[c] * X[c];
            out.data[static_cast<std::size_t>(r)] = acc;
        }
        return push(OpKind::MatVec, w, x, -1, std::move(out));
    }

    // 3x3 convolution, stride 1, zero padding. Input {H,W,Cin}, kernel
    // {Cout,Cin,3,3}, bias {Cout} -> {H,W,Cout}.
    NodeId conv3x3(NodeId x, NodeId k, NodeId b) {
        const auto& xs = shape_of(x, "conv3x3");
        const auto& ks = shape_of(k, "conv3x3");
        const auto& bs = shape_of(b, "conv3x3");
        if (xs.rank != 3 || ks.rank != 4 || ks.dim[2] != 3 || ks.dim[3] != 3 ||
            ks.dim[1] != xs.dim[2])
            fail_shapes("conv3x3", xs, ks);
        if (bs.rank != 1 || bs.dim[0] != ks.dim[0]) fail_shapes("conv3x3", ks, bs);
        const int H = xs.dim[0], W = xs.dim[1], C = xs.dim[2], O = ks.dim[0];
        Tensor<T> out(Shape{H, W, O});
        // Kernel transposed to {dy,dx,c,o} so the inner accumulation runs over
        // contiguous output channels.
        std::vector<T> kt(static_cast<std::size_t>(9) * C * O);
        {
            const T* K = value(k).ptr();
            for (int o = 0; o < O; ++o)
                for (int c = 0; c < C; ++c)
                    for (int t = 0; t < 9; ++t)
                        kt[static_cast<std::size_t>(t * C + c) * O + o] =
                            K[(static_cast<std::size_t>(o) * C + c) * 9 + t];
        }
        const T* X = value(x).ptr();
        const T* B = value(b).ptr();
        T* Y = out.ptr();
        for (int y = 0; y < H; ++y) {
            for (int xx = 0; xx < W; ++xx) {
                T* yp = Y + (static_cast<std::size_t>(y) * W + xx) * O;
                for (int o = 0; o < O; ++o) yp[o] = B[o];
                for (int dy = 0; dy < 3; ++dy) {
                    const int sy = y + dy - 1;
                    if (sy < 0 || sy >= H) continue;
                    for (int dx = 0; dx < 3; ++dx) {
                        const int sx = xx + dx - 1;
                        if (sx < 0 || sx >= W) continue;
                        const T* xp = X + (static_cast<std::size_t>(sy) * W + sx) * C;
                        const T* kp = kt.data() + static_cast<std::size_t>(dy * 3 + dx) * C * O;
                        for (int c = 0; c < C; ++c) {
                            const T v = xp[c];
                            const T* kc = kp + static_cast<std::size_t>(c) * O;
                            for (int o = 0; o < O; ++o) yp[o] += v * kc[o];
                        }
                    }
                }
            }
        }
        return push(OpKind::Conv3x3, x, k, b, std::move(out));
    }

    NodeId add(NodeId a, NodeId b) { return elementwise2(OpKind::Add, a, b); }
    NodeId mul(NodeId a, NodeId b) { return elementwise2(OpKind::Mul, a, b); }

    NodeId exp(NodeId a) {
        return elementwise1(OpKind::Exp, a, [](T v) { return std::exp(v); });
    }
    NodeId abs(NodeId a) {
        return elementwise1(OpKind::Abs, a, [](T v) { return std::abs(v); });
    }
    NodeId tanh(NodeId a) {
        return elementwise1(OpKind::Tanh, a, [](T v) { return std::tanh(v); });
    }
    NodeId relu(NodeId a) {
        return elementwise1(OpKind::Relu, a, [](T v) { return v > T(0) ? v : T(0); });
    }

    NodeId avgpool2x2(NodeId a) {
        const auto& s = shape_of(a, "avgpool2x2");
        if (s.rank != 3 || s.dim[0] % 2 != 0 || s.dim[1] % 2 != 0)
            fail_shapes("avgpool2x2", s, s);
        const int H = s.dim[0], W = s.dim[1], C = s.dim[2];
        Tensor<T> out(Shape{H / 2, W / 2, C});
        const T* X = value(a).ptr();
        T* Y = out.ptr();
        for (int y = 0; y < H / 2; ++y)
            for (int x = 0; x < W / 2; ++x) {
                const T* p00 = X + (static_cast<std::size_t>(2 * y) * W + 2 * x) * C;
                const T* p01 = p00 + C;
                const T* p10 = X + (static_cast<std::size_t>(2 * y + 1) * W + 2 * x) * C;
                const T* p11 = p10 + C;
                T* yp = Y + (static_cast<std::size_t>(y) * (W / 2) + x) * C;
                for (int c = 0; c < C; ++c)
                    yp[c] = (p00[c] + p01[c] + p10[c] + p11[c]) * T(0.25);
            }
        return push(OpKind::AvgPool2x2, a, -1, -1, std::move(out));
    }

    NodeId global_avg_pool(NodeId a) {
        const auto& s = shape_of(a, "global_avg_pool");
        if (s.rank != 3) fail_shapes("global_avg_pool", s, s);
        const int H = s.dim[0], W = s.dim[1], C = s.dim[2];
        Tensor<T> out(Shape{C});
        const T* X = value(a).ptr();
        for (int i = 0; i < H * W; ++i)
            for (int c = 0; c < C; ++c) out.data[static_cast<std::size_t>(c)] += X[static_cast<std::size_t>(i) * C + c];
        const T inv = T(1) / static_cast<T>(H * W);
        for (auto& v : out.data) v *= inv;
        return push(OpKind::GlobalAvgPool, a, -1, -1, std::move(out));
    }

    // Rank-1 slice [begin, end).
    NodeId slice(NodeId a, int begin, int end) {
        const auto& s = shape_of(a, "slice");
        if (s.rank != 1 || begin < 0 || end > s.dim[0] || begin >= end)
            throw std::invalid_argument("slice: invalid range [" + std::to_string(begin) + "," +
                                        std::to_string(end) + ") for shape " + s.str());
        Tensor<T> out(Shape{end - begin});
        const T* X = value(a).ptr();
        for (int i = begin; i < end; ++i) out.data[static_cast<std::size_t>(i - begin)] = X[i];
        NodeId id = push(OpKind::Slice, a, -1, -1, std::move(out));
        nodes_.back().aux0 = begin;
        nodes_.back().aux1 = end;
        return id;
    }

    // Rank-1 concatenation.
    NodeId concat(NodeId a, NodeId b) {
        const auto& sa = shape_of(a, "concat");
        const auto& sb = shape_of(b, "concat");
        if (sa.rank != 1 || sb.rank != 1) fail_shapes("concat", sa, sb);
        Tensor<T> out(Shape{sa.dim[0] + sb.dim[0]});
        const T* A = value(a).ptr();
        const T* B = value(b).ptr();
        for (int i = 0; i < sa.dim[0]; ++i) out.data[static_cast<std::size_t>(i)] = A[i];
        for (int i = 0; i < sb.dim[0]; ++i) out.data[static_cast<std::size_t>(sa.dim[0] + i)] = B[i];
        return push(OpKind::Concat, a, b, -1, std::move(out));
    }

    // Sum of all entries -> scalar (shape {1}).
    NodeId sum(NodeId a) {
        const auto& v = value(a);
        T acc = T(0);
        for (const T x : v.data) acc += x;
        return push(OpKind::Sum, a, -1, -1, Tensor<T>::scalar(acc));
    }

    const Tensor<T>& value(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
    std::size_t size() const { return nodes_.size(); }
    const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }

    // d(root)/d(node) for every node on the tape, indexed by node id.
    // root must be scalar-valued.
    std::vector<Tensor<T>> backward(NodeId root) const {
        if (root < 0 || static_cast<std::size_t>(root) >= nodes_.size())
            throw std::invalid_argument("backward: root is not on the tape");
        if (nodes_[static_cast<std::size_t>(root)].value.numel() != 1)
            throw std::invalid_argument("backward: root must be scalar, got shape " +
                                        nodes_[static_cast<std::size_t>(root)].value.shape.str());
        std::vector<Tensor<T>> grad(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) grad[i] = Tensor<T>(nodes_[i].value.shape);
        grad[static_cast<std::size_t>(root)].data[0] = T(1);
        for (NodeId id = root; id >= 0; --id) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            const Tensor<T>& g = grad[static_cast<std::size_t>(id)];
            switch (n.kind) {
                case OpKind::Leaf: break;
                case OpKind::MatVec: backward_matvec(n, g, grad); break;
                case OpKind::Conv3x3: backward_conv3x3(n, g, grad); break;
                case OpKind::Add: {
                    accumulate(grad[static_cast<std::size_t>(n.in0)], g.data);
                    accumulate(grad[static_cast<std::size_t>(n.in1)], g.data);
                    break;
                }
                case OpKind::Mul: {
                    const auto& a = nodes_[static_cast<std::size_t>(n.in0)].value;
                    const auto& b = nodes_[static_cast<std::size_t>(n.in1)].value;
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    auto& gb = grad[static_cast<std::size_t>(n.in1)];
                    for (std::size_t i = 0; i < g.data.size(); ++i) {
                        ga.data[i] += g.data[i] * b.data[i];
                        gb.data[i] += g.data[i] * a.data[i];
                    }
                    break;
                }
                case OpKind::Exp: {
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    for (std::size_t i = 0; i < g.data.size(); ++i)
                        ga.data[i] += g.data[i] * n.value.data[i];
                    break;
                }
                case OpKind::Abs: {
                    const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    for (std::size_t i = 0; i < g.data.size(); ++i) {
                        const T s = x.data[i] > T(0) ? T(1) : (x.data[i] < T(0) ? T(-1) : T(0));
                        ga.data[i] += g.data[i] * s;
                    }
                    break;
                }
                case OpKind::Tanh: {
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    for (std::size_t i = 0; i < g.data.size(); ++i)
                        ga.data[i] += g.data[i] * (T(1) - n.value.data[i] * n.value.data[i]);
                    break;
                }
                case OpKind::Relu: {
                    // Subgradient at 0 is 0.
                    const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    for (std::size_t i = 0; i < g.data.size(); ++i)
                        if (x.data[i] > T(0)) ga.data[i] += g.data[i];
                    break;
                }
                case OpKind::AvgPool2x2: {
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    const auto& is = ga.shape;
                    const int W = is.dim[1], C = is.dim[2];
                    const int Ho = n.value.shape.dim[0], Wo = n.value.shape.dim[1];
                    for (int y = 0; y < Ho; ++y)
                        for (int x = 0; x < Wo; ++x) {
                            const T* gp = g.ptr() + (static_cast<std::size_t>(y) * Wo + x) * C;
                            for (int oy = 0; oy < 2; ++oy)
                                for (int ox = 0; ox < 2; ++ox) {
                                    T* ip = ga.ptr() +
                                            (static_cast<std::size_t>(2 * y + oy) * W + 2 * x + ox) * C;
                                    for (int c = 0; c < C; ++c) ip[c] += gp[c] * T(0.25);
                                }
                        }
                    break;
                }
                case OpKind::GlobalAvgPool: {
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    const auto& is = ga.shape;
                    const int HW = is.dim[0] * is.dim[1], C = is.dim[2];
                    const T inv = T(1) / static_cast<T>(HW);
                    for (int i = 0; i < HW; ++i)
                        for (int c = 0; c < C; ++c)
                            ga.data[static_cast<std::size_t>(i) * C + c] += g.data[static_cast<std::size_t>(c)] * inv;
                    break;
                }
                case OpKind::Slice: {
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    for (int i = n.aux0; i < n.aux1; ++i)
                        ga.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i - n.aux0)];
                    break;
                }
                case OpKind::Concat: {
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    auto& gb = grad[static_cast<std::size_t>(n.in1)];
                    const std::size_t na = ga.data.size();
                    for (std::size_t i = 0; i < na; ++i) ga.data[i] += g.data[i];
                    for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += g.data[na + i];
                    break;
                }
                case OpKind::Sum: {
                    auto& ga = grad[static_cast<std::size_t>(n.in0)];
                    const T gs = g.data[0];
                    for (auto& v : ga.data) v += gs;
                    break;
                }
            }
        }
        return grad;
    }

  private:
    std::vector<Node> nodes_;

    NodeId push(OpKind kind, NodeId a, NodeId b, NodeId c, Tensor<T> out) {
        nodes_.push_back(Node{kind, a, b, c, 0, 0, std::move(out)});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    const Shape& shape_of(NodeId id, const char* op) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw std::invalid_argument(std::string(op) + ": input node not on the tape");
        return nodes_[static_cast<std::size_t>(id)].value.shape;
    }

    [[noreturn]] static void fail_shapes(const char* op, const Shape& a, const Shape& b) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
    }

    NodeId elementwise2(OpKind kind, NodeId a, NodeId b) {
        const auto& sa = shape_of(a, op_name(kind));
        const auto& sb = shape_of(b, op_name(kind));
        if (sa != sb) fail_shapes(op_name(kind), sa, sb);
        Tensor<T> out(sa);
        const auto& va = value(a).data;
        const auto& vb = value(b).data;
        if (kind == OpKind::Add)
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = va[i] + vb[i];
        else
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = va[i] * vb[i];
        return push(kind, a, b, -1, std::move(out));
    }

    template <typename F>
    NodeId elementwise1(OpKind kind, NodeId a, F f) {
        const auto& va = value(a);
        Tensor<T> out(va.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(va.data[i]);
        return push(kind, a, -1, -1, std::move(out));
    }

    static void accumulate(Tensor<T>& dst, const std::vector<T>& src) {
        for (std::size_t i = 0; i < src.size(); ++i) dst.data[i] += src[i];
    }

    void backward_matvec(const Node& n, const Tensor<T>& g, std::vector<Tensor<T>>& grad) const {
        const auto& W = nodes_[static_cast<std::size_t>(n.in0)].value;
        const auto& x = nodes_[static_cast<std::size_t>(n.in1)].value;
        auto& gw = grad[static_cast<std::size_t>(n.in0)];
        auto& gx = grad[static_cast<std::size_t>(n.in1)];
        const int rows = W.shape.dim[0], cols = W.shape.dim[1];
        for (int r = 0; r < rows; ++r) {
            const T gr = g.data[static_cast<std::size_t>(r)];
            const T* wr = W.ptr() + static_cast<std::size_t>(r) * cols;
            T* gwr = gw.ptr() + static_cast<std::size_t>(r) * cols;
            T* gxp = gx.ptr();
            for (int c = 0; c < cols; ++c) {
                gwr[c] += gr * x.data[static_cast<std::size_t>(c)];
                gxp[c] += gr * wr[c];
            }
        }
    }

    void backward_conv3x3(const Node& n, const Tensor<T>& g, std::vector<Tensor<T>>& grad) const {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        const auto& k = nodes_[static_cast<std::size_t>(n.in1)].value;
        auto& gx = grad[static_cast<std::size_t>(n.in0)];
        auto& gk = grad[static_cast<std::size_t>(n.in1)];
        auto& gb = grad[static_cast<std::size_t>(n.in2)];
        const int H = x.shape.dim[0], W = x.shape.dim[1], C = x.shape.dim[2];
        const int O = k.shape.dim[0];
        const T* G = g.ptr();
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                const T* gp = G + (static_cast<std::size_t>(y) * W + xx) * O;
                for (int o = 0; o < O; ++o) gb.data[static_cast<std::size_t>(o)] += gp[o];
                for (int dy = 0; dy < 3; ++dy) {
                    const int sy = y + dy - 1;
                    if (sy < 0 || sy >= H) continue;
                    for (int dx = 0; dx < 3; ++dx) {
                        const int sx = xx + dx - 1;
                        if (sx < 0 || sx >= W) continue;
                        const T* xp = x.ptr() + (static_cast<std::size_t>(sy) * W + sx) * C;
                        T* gxp = gx.ptr() + (static_cast<std::size_t>(sy) * W + sx) * C;
                        for (int o = 0; o < O; ++o) {
                            const T go = gp[o];
                            const T* kp = k.ptr() + (static_cast<std::size_t>(o) * C) * 9 +
                                          static_cast<std::size_t>(dy * 3 + dx);
                            T* gkp = gk.ptr() + (static_cast<std::size_t>(o) * C) * 9 +
                                     static_cast<std::size_t>(dy * 3 + dx);
                            for (int c = 0; c < C; ++c) {
                                gxp[c] += go * kp[static_cast<std::size_t>(c) * 9];
                                gkp[static_cast<std::size_t>(c) * 9] += go * xp[c];
                            }
                        }
                    }
                }
            }
    }
};

// Max over coordinates of |analytic - central difference| / (|central| + 1e-8)
// for a scalar function built on a fresh tape from a single leaf. NaN anywhere
// in f's output reports as +inf. Run with T=double for meaningful tolerances.
template <typename T>
double finite_diff_check(const std::function<NodeId(Tape<T>&, NodeId)>& build,
                         const Tensor<T>& x, double step) {
    if (!(step > 0)) throw std::invalid_argument("finite_diff_check: step must be > 0");
    Tape<T> tape;
    NodeId in = tape.leaf(x);
    NodeId root = build(tape, in);
    if (std::isnan(static_cast<double>(tape.value(root).data[0])))
        return std::numeric_limits<double>::infinity();
    auto grads = tape.backward(root);
    const Tensor<T>& analytic = grads[static_cast<std::size_t>(in)];

    auto eval = [&](const Tensor<T>& probe) {
        Tape<T> t;
        NodeId r = build(t, t.leaf(probe));
        return static_cast<double>(t.value(r).data[0]);
    };

    double worst = 0.0;
    Tensor<T> probe = x;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const T orig = probe.data[i];
        probe.data[i] = orig + static_cast<T>(step);
        const double fp = eval(probe);
        probe.data[i] = orig - static_cast<T>(step);
        const double fm = eval(probe);
        probe.data[i] = orig;
        if (std::isnan(fp) || std::isnan(fm)) return std::numeric_limits<double>::infinity();
        const double central = (fp - fm) / (2.0 * step);
        const double err = std::abs(static_cast<double>(analytic.data[i]) - central) /
                           (std::abs(central) + 1e-8);
        if (err > worst) worst = err;
    }
    return worst;
}

}  // namespace flowlens

#endif
