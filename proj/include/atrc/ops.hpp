// Differentiable primitives on VarT: elementwise math, shape manipulation,
// reductions, softmax and (batched) matrix products. Each op builds one node
// whose closure implements the exact backward of the forward computation.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "atrc/autodiff.hpp"
#include "atrc/tensor.hpp"

namespace atrc {

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// C (M x N) = opA * opB, optionally accumulating into C.
template <typename T>
void gemm(T* c, const T* a, const T* b, std::size_t m, std::size_t n, std::size_t k,
          bool ta, bool tb, bool accumulate_out) {
    EMap<T> C(c, m, n);
    ECMap<T> A(a, ta ? k : m, ta ? m : k);
    ECMap<T> B(b, tb ? n : k, tb ? k : n);
    if (!ta && !tb) accumulate_out ? void(C.noalias() += A * B) : void(C.noalias() = A * B);
    else if (!ta && tb) accumulate_out ? void(C.noalias() += A * B.transpose()) : void(C.noalias() = A * B.transpose());
    else if (ta && !tb) accumulate_out ? void(C.noalias() += A.transpose() * B) : void(C.noalias() = A.transpose() * B);
    else accumulate_out ? void(C.noalias() += A.transpose() * B.transpose()) : void(C.noalias() = A.transpose() * B.transpose());
}

inline void check_axis(const std::string& op, const Shape& s, std::size_t axis) {
    if (axis >= s.size()) fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
}

// Splits a shape into (outer, axis extent, inner) around `axis`.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    if (!same_shape(a->value, b->value))
        fail("add", "shape mismatch " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
    TensorT<T> out(a->value.shape());
    const T* pa = a->value.data();
    const T* pb = b->value.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
    return make_node<T>(std::move(out), {a, b}, [](NodeT<T>& n) {
        accumulate(*n.parents[0], n.grad);
        accumulate(*n.parents[1], n.grad);
    });
}

template <typename T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    if (!same_shape(a->value, b->value))
        fail("sub", "shape mismatch " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
    TensorT<T> out(a->value.shape());
    const T* pa = a->value.data();
    const T* pb = b->value.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
    return make_node<T>(std::move(out), {a, b}, [](NodeT<T>& n) {
        accumulate(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            NodeT<T>& p = *n.parents[1];
            p.ensure_grad();
            const T* g = n.grad.data();
            T* pg = p.grad.data();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] -= g[i];
        }
    });
}

template <typename T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    if (!same_shape(a->value, b->value))
        fail("mul", "shape mismatch " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
    TensorT<T> out(a->value.shape());
    const T* pa = a->value.data();
    const T* pb = b->value.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
    return make_node<T>(std::move(out), {a, b}, [](NodeT<T>& n) {
        const T* g = n.grad.data();
        const T* va = n.parents[0]->value.data();
        const T* vb = n.parents[1]->value.data();
        if (n.parents[0]->requires_grad) {
            NodeT<T>& p = *n.parents[0];
            p.ensure_grad();
            T* pg = p.grad.data();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += g[i] * vb[i];
        }
        if (n.parents[1]->requires_grad) {
            NodeT<T>& p = *n.parents[1];
            p.ensure_grad();
            T* pg = p.grad.data();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += g[i] * va[i];
        }
    });
}

// y = x / d where d matches x except for one broadcast axis of extent 1.
template <typename T>
VarT<T> div_bcast(const VarT<T>& x, const VarT<T>& d, std::size_t axis) {
    const Shape& xs = x->value.shape();
    const Shape& ds = d->value.shape();
    detail::check_axis("div_bcast", xs, axis);
    if (ds.size() != xs.size() || ds[axis] != 1)
        fail("div_bcast", "denominator " + shape_str(ds) + " must have extent 1 on axis " + std::to_string(axis));
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (i != axis && ds[i] != xs[i])
            fail("div_bcast", "shape mismatch " + shape_str(xs) + " vs " + shape_str(ds));

    auto sp = detail::split_axis(xs, axis);
    TensorT<T> out(xs);
    const T* px = x->value.data();
    const T* pd = d->value.data();
    T* po = out.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.len; ++j)
            for (std::size_t i = 0; i < sp.inner; ++i)
                po[(o * sp.len + j) * sp.inner + i] =
                    px[(o * sp.len + j) * sp.inner + i] / pd[o * sp.inner + i];

    return make_node<T>(std::move(out), {x, d}, [sp](NodeT<T>& n) {
        const T* g = n.grad.data();
        const T* px = n.parents[0]->value.data();
        const T* pd = n.parents[1]->value.data();
        if (n.parents[0]->requires_grad) {
            NodeT<T>& p = *n.parents[0];
            p.ensure_grad();
            T* pg = p.grad.data();
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t j = 0; j < sp.len; ++j)
                    for (std::size_t i = 0; i < sp.inner; ++i)
                        pg[(o * sp.len + j) * sp.inner + i] +=
                            g[(o * sp.len + j) * sp.inner + i] / pd[o * sp.inner + i];
        }
        if (n.parents[1]->requires_grad) {
            NodeT<T>& p = *n.parents[1];
            p.ensure_grad();
            T* pg = p.grad.data();
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    T acc = T(0);
                    const T dd = pd[o * sp.inner + i];
                    for (std::size_t j = 0; j < sp.len; ++j) {
                        std::size_t ix = (o * sp.len + j) * sp.inner + i;
                        acc -= g[ix] * px[ix] / (dd * dd);
                    }
                    pg[o * sp.inner + i] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// scalar variants
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> add_scalar(const VarT<T>& a, T c) {
    TensorT<T> out(a->value.shape());
    const T* pa = a->value.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + c;
    return make_node<T>(std::move(out), {a}, [](NodeT<T>& n) { accumulate(*n.parents[0], n.grad); });
}

template <typename T>
VarT<T> mul_scalar(const VarT<T>& a, T c) {
    TensorT<T> out(a->value.shape());
    const T* pa = a->value.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * c;
    return make_node<T>(std::move(out), {a}, [c](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        NodeT<T>& p = *n.parents[0];
        p.ensure_grad();
        const T* g = n.grad.data();
        T* pg = p.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += g[i] * c;
    });
}

template <typename T>
VarT<T> neg(const VarT<T>& a) { return mul_scalar(a, T(-1)); }

// y = s * x where s is a scalar-shaped variable (used for mixing weights).
template <typename T>
VarT<T> scale_by(const VarT<T>& x, const VarT<T>& s) {
    if (s->value.size() != 1) fail("scale_by", "scale must be scalar, got " + shape_str(s->value.shape()));
    const T sv = s->value[0];
    TensorT<T> out(x->value.shape());
    const T* px = x->value.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] * sv;
    return make_node<T>(std::move(out), {x, s}, [sv](NodeT<T>& n) {
        const T* g = n.grad.data();
        if (n.parents[0]->requires_grad) {
            NodeT<T>& p = *n.parents[0];
            p.ensure_grad();
            T* pg = p.grad.data();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += g[i] * sv;
        }
        if (n.parents[1]->requires_grad) {
            const T* px = n.parents[0]->value.data();
            T acc = T(0);
            for (std::size_t i = 0; i < n.grad.size(); ++i) acc += g[i] * px[i];
            accumulate(*n.parents[1], &acc, 1);
        }
    });
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

namespace detail {
template <typename T, typename F, typename B>
VarT<T> unary_op(const VarT<T>& a, F fwd, B bwd) {
    TensorT<T> out(a->value.shape());
    const T* pa = a->value.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = fwd(pa[i]);
    return make_node<T>(std::move(out), {a}, [bwd](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        NodeT<T>& p = *n.parents[0];
        p.ensure_grad();
        const T* g = n.grad.data();
        const T* x = p.value.data();
        const T* y = n.value.data();
        T* pg = p.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += bwd(g[i], x[i], y[i]);
    });
}
}  // namespace detail

template <typename T>
VarT<T> relu(const VarT<T>& a) {
    return detail::unary_op(
        a, [](T x) { return x > T(0) ? x : T(0); },
        [](T g, T x, T) { return x > T(0) ? g : T(0); });
}

template <typename T>
VarT<T> exp_op(const VarT<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::exp(x); },
        [](T g, T, T y) { return g * y; });
}

template <typename T>
VarT<T> log_op(const VarT<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::log(x); },
        [](T g, T x, T) { return g / x; });
}

template <typename T>
VarT<T> sqrt_op(const VarT<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::sqrt(x); },
        [](T g, T, T y) { return g / (T(2) * std::max(y, std::numeric_limits<T>::min())); });
}

template <typename T>
VarT<T> abs_op(const VarT<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::abs(x); },
        [](T g, T x, T) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

// Overflow-safe softplus, strictly positive for every finite input.
template <typename T>
VarT<T> softplus(const VarT<T>& a) {
    return detail::unary_op(
        a,
        [](T x) {
            T y = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
            return std::max(y, std::numeric_limits<T>::min());
        },
        [](T g, T x, T) {
            // sigmoid(x), stable on both tails
            T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
            return g * s;
        });
}

template <typename T>
VarT<T> clamp_min(const VarT<T>& a, T floor) {
    return detail::unary_op(
        a, [floor](T x) { return x < floor ? floor : x; },
        [floor](T g, T x, T) { return x > floor ? g : T(0); });
}

// Forward identity, zero gradient upstream.
template <typename T>
VarT<T> stop_gradient(const VarT<T>& a) {
    return make_leaf(a->value, false);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> reshape(const VarT<T>& a, Shape shape) {
    if (numel(shape) != a->value.size())
        fail("reshape", "cannot view " + shape_str(a->value.shape()) + " as " + shape_str(shape));
    TensorT<T> out(std::move(shape), a->value.values());
    return make_node<T>(std::move(out), {a}, [](NodeT<T>& n) {
        accumulate(*n.parents[0], n.grad.data(), n.grad.size());
    });
}

namespace detail {
template <typename T>
void permute_copy(const T* src, const Shape& in_shape, const std::vector<std::size_t>& axes, T* dst,
                  bool add_to_dst) {
    const std::size_t r = in_shape.size();
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
    // strides of the input
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * in_shape[i];
    // fast path: swap of the last two axes of a rank-3 tensor
    if (r == 3 && axes[0] == 0 && axes[1] == 2 && axes[2] == 1) {
        const std::size_t B = in_shape[0], M = in_shape[1], N = in_shape[2];
        for (std::size_t b = 0; b < B; ++b) {
            const T* s = src + b * M * N;
            T* d = dst + b * M * N;
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < N; ++j) {
                    if (add_to_dst) d[j * M + i] += s[i * N + j];
                    else d[j * M + i] = s[i * N + j];
                }
        }
        return;
    }
    std::vector<std::size_t> idx(r, 0);
    const std::size_t total = numel(in_shape);
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t src_off = 0;
        for (std::size_t i = 0; i < r; ++i) src_off += idx[i] * in_stride[axes[i]];
        if (add_to_dst) dst[flat] += src[src_off];
        else dst[flat] = src[src_off];
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
}
}  // namespace detail

template <typename T>
VarT<T> permute(const VarT<T>& a, std::vector<std::size_t> axes) {
    const Shape& in = a->value.shape();
    if (axes.size() != in.size()) fail("permute", "axes rank mismatch for " + shape_str(in));
    std::vector<bool> used(in.size(), false);
    Shape out_shape(in.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (axes[i] >= in.size() || used[axes[i]]) fail("permute", "invalid axes");
        used[axes[i]] = true;
        out_shape[i] = in[axes[i]];
    }
    TensorT<T> out(out_shape);
    detail::permute_copy(a->value.data(), in, axes, out.data(), false);
    // inverse permutation for the backward pass
    std::vector<std::size_t> inv(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
    return make_node<T>(std::move(out), {a}, [inv, out_shape](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        NodeT<T>& p = *n.parents[0];
        p.ensure_grad();
        detail::permute_copy(n.grad.data(), out_shape, inv, p.grad.data(), true);
    });
}

template <typename T>
VarT<T> concat(const std::vector<VarT<T>>& parts, std::size_t axis) {
    if (parts.empty()) fail("concat", "empty input list");
    const Shape& first = parts[0]->value.shape();
    detail::check_axis("concat", first, axis);
    Shape out_shape = first;
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        const Shape& s = p->value.shape();
        if (s.size() != first.size()) fail("concat", "rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != first[i])
                fail("concat", "shape mismatch " + shape_str(s) + " vs " + shape_str(first));
        total_axis += s[axis];
    }
    out_shape[axis] = total_axis;
    auto sp = detail::split_axis(out_shape, axis);
    TensorT<T> out(out_shape);
    T* po = out.data();
    std::size_t offset = 0;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
        const std::size_t len = p->value.shape()[axis];
        lens.push_back(len);
        const T* src = p->value.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy(src + o * len * sp.inner, src + (o + 1) * len * sp.inner,
                      po + (o * sp.len + offset) * sp.inner);
        offset += len;
    }
    std::vector<VarT<T>> parents(parts.begin(), parts.end());
    return make_node<T>(std::move(out), std::move(parents), [sp, lens](NodeT<T>& n) {
        const T* g = n.grad.data();
        std::size_t offset = 0;
        for (std::size_t pi = 0; pi < lens.size(); ++pi) {
            const std::size_t len = lens[pi];
            NodeT<T>& p = *n.parents[pi];
            if (p.requires_grad) {
                p.ensure_grad();
                T* pg = p.grad.data();
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    const T* src = g + (o * sp.len + offset) * sp.inner;
                    T* dst = pg + o * len * sp.inner;
                    for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
                }
            }
            offset += len;
        }
    });
}

template <typename T>
VarT<T> slice(const VarT<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& in = a->value.shape();
    detail::check_axis("slice", in, axis);
    if (start + len > in[axis] || len == 0)
        fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                          ") out of bounds for " + shape_str(in));
    Shape out_shape = in;
    out_shape[axis] = len;
    auto sp = detail::split_axis(in, axis);
    TensorT<T> out(out_shape);
    const T* src = a->value.data();
    T* dst = out.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy(src + (o * sp.len + start) * sp.inner, src + (o * sp.len + start + len) * sp.inner,
                  dst + o * len * sp.inner);
    return make_node<T>(std::move(out), {a}, [sp, start, len](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        NodeT<T>& p = *n.parents[0];
        p.ensure_grad();
        const T* g = n.grad.data();
        T* pg = p.grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const T* src = g + o * len * sp.inner;
            T* dst = pg + (o * sp.len + start) * sp.inner;
            for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> sum_all(const VarT<T>& a) {
    T acc = T(0);
    const T* pa = a->value.data();
    for (std::size_t i = 0; i < a->value.size(); ++i) acc += pa[i];
    return make_node<T>(TensorT<T>::scalar(acc), {a}, [](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        NodeT<T>& p = *n.parents[0];
        p.ensure_grad();
        const T g = n.grad[0];
        T* pg = p.grad.data();
        for (std::size_t i = 0; i < p.grad.size(); ++i) pg[i] += g;
    });
}

template <typename T>
VarT<T> mean_all(const VarT<T>& a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a->value.size()));
}

// Sum over one axis, keeping it with extent 1.
template <typename T>
VarT<T> sum_axis(const VarT<T>& a, std::size_t axis) {
    const Shape& in = a->value.shape();
    detail::check_axis("sum_axis", in, axis);
    auto sp = detail::split_axis(in, axis);
    Shape out_shape = in;
    out_shape[axis] = 1;
    TensorT<T> out(out_shape);
    const T* pa = a->value.data();
    T* po = out.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.len; ++j)
            for (std::size_t i = 0; i < sp.inner; ++i)
                po[o * sp.inner + i] += pa[(o * sp.len + j) * sp.inner + i];
    return make_node<T>(std::move(out), {a}, [sp](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        NodeT<T>& p = *n.parents[0];
        p.ensure_grad();
        const T* g = n.grad.data();
        T* pg = p.grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < sp.len; ++j)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    pg[(o * sp.len + j) * sp.inner + i] += g[o * sp.inner + i];
    });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void softmax_forward(const T* x, T* y, const AxisSplit& sp) {
    if (sp.inner == 1) {
        // contiguous rows: vectorized exp
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            Eigen::Map<const Arr> row(x + o * sp.len, sp.len);
            Eigen::Map<Arr> out(y + o * sp.len, sp.len);
            out = (row - row.maxCoeff()).exp();
            out /= out.sum();
        }
        return;
    }
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            T mx = x[base];
            for (std::size_t j = 1; j < sp.len; ++j) mx = std::max(mx, x[base + j * sp.inner]);
            T sum = T(0);
            for (std::size_t j = 0; j < sp.len; ++j) {
                T e = std::exp(x[base + j * sp.inner] - mx);
                y[base + j * sp.inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::size_t j = 0; j < sp.len; ++j) y[base + j * sp.inner] *= inv;
        }
}
}  // namespace detail

// Max-subtracted softmax along `axis`.
template <typename T>
VarT<T> softmax_axis(const VarT<T>& a, std::size_t axis) {
    detail::check_axis("softmax_axis", a->value.shape(), axis);
    auto sp = detail::split_axis(a->value.shape(), axis);
    TensorT<T> out(a->value.shape());
    detail::softmax_forward(a->value.data(), out.data(), sp);
    return make_node<T>(std::move(out), {a}, [sp](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        NodeT<T>& p = *n.parents[0];
        p.ensure_grad();
        const T* g = n.grad.data();
        const T* y = n.value.data();
        T* pg = p.grad.data();
        if (sp.inner == 1) {
            using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
            for (std::size_t o = 0; o < sp.outer; ++o) {
                Eigen::Map<const Arr> gr(g + o * sp.len, sp.len);
                Eigen::Map<const Arr> yr(y + o * sp.len, sp.len);
                const T dot = (gr * yr).sum();
                Eigen::Map<Arr>(pg + o * sp.len, sp.len) += yr * (gr - dot);
            }
            return;
        }
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                T dot = T(0);
                for (std::size_t j = 0; j < sp.len; ++j)
                    dot += g[base + j * sp.inner] * y[base + j * sp.inner];
                for (std::size_t j = 0; j < sp.len; ++j) {
                    std::size_t ix = base + j * sp.inner;
                    pg[ix] += y[ix] * (g[ix] - dot);
                }
            }
    });
}

template <typename T>
VarT<T> log_softmax_axis(const VarT<T>& a, std::size_t axis) {
    detail::check_axis("log_softmax_axis", a->value.shape(), axis);
    auto sp = detail::split_axis(a->value.shape(), axis);
    TensorT<T> out(a->value.shape());
    const T* x = a->value.data();
    T* y = out.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            T mx = x[base];
            for (std::size_t j = 1; j < sp.len; ++j) mx = std::max(mx, x[base + j * sp.inner]);
            T sum = T(0);
            for (std::size_t j = 0; j < sp.len; ++j) sum += std::exp(x[base + j * sp.inner] - mx);
            const T lse = mx + std::log(sum);
            for (std::size_t j = 0; j < sp.len; ++j)
                y[base + j * sp.inner] = x[base + j * sp.inner] - lse;
        }
    return make_node<T>(std::move(out), {a}, [sp](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        NodeT<T>& p = *n.parents[0];
        p.ensure_grad();
        const T* g = n.grad.data();
        const T* y = n.value.data();
        T* pg = p.grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                T gsum = T(0);
                for (std::size_t j = 0; j < sp.len; ++j) gsum += g[base + j * sp.inner];
                for (std::size_t j = 0; j < sp.len; ++j) {
                    std::size_t ix = base + j * sp.inner;
                    pg[ix] += g[ix] - std::exp(y[ix]) * gsum;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

// 2-d matrix product with optional transposes: C = op(A) op(B).
template <typename T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b, bool ta = false, bool tb = false) {
    const Shape& sa = a->value.shape();
    const Shape& sb = b->value.shape();
    if (sa.size() != 2 || sb.size() != 2)
        fail("matmul", "expects rank-2 inputs, got " + shape_str(sa) + " and " + shape_str(sb));
    const std::size_t m = ta ? sa[1] : sa[0];
    const std::size_t ka = ta ? sa[0] : sa[1];
    const std::size_t kb = tb ? sb[1] : sb[0];
    const std::size_t n = tb ? sb[0] : sb[1];
    if (ka != kb)
        fail("matmul", "inner extent mismatch " + shape_str(sa) + (ta ? "^T" : "") + " x " +
                           shape_str(sb) + (tb ? "^T" : ""));
    TensorT<T> out({m, n});
    detail::gemm(out.data(), a->value.data(), b->value.data(), m, n, ka, ta, tb, false);
    return make_node<T>(std::move(out), {a, b}, [m, n, k = ka, ta, tb](NodeT<T>& n_) {
        const T* g = n_.grad.data();
        const T* va = n_.parents[0]->value.data();
        const T* vb = n_.parents[1]->value.data();
        if (n_.parents[0]->requires_grad) {
            NodeT<T>& p = *n_.parents[0];
            p.ensure_grad();
            if (!ta) detail::gemm(p.grad.data(), g, vb, m, k, n, false, !tb, true);
            else detail::gemm(p.grad.data(), vb, g, k, m, n, tb, true, true);
        }
        if (n_.parents[1]->requires_grad) {
            NodeT<T>& p = *n_.parents[1];
            p.ensure_grad();
            if (!tb) detail::gemm(p.grad.data(), va, g, k, n, m, !ta, false, true);
            else detail::gemm(p.grad.data(), g, va, n, k, m, true, ta, true);
        }
    });
}

// Batched matrix product on rank-3 tensors sharing the leading extent.
template <typename T>
VarT<T> bmm(const VarT<T>& a, const VarT<T>& b, bool ta = false, bool tb = false) {
    const Shape& sa = a->value.shape();
    const Shape& sb = b->value.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0])
        fail("bmm", "expects rank-3 inputs with equal batch, got " + shape_str(sa) + " and " + shape_str(sb));
    const std::size_t B = sa[0];
    const std::size_t m = ta ? sa[2] : sa[1];
    const std::size_t ka = ta ? sa[1] : sa[2];
    const std::size_t kb = tb ? sb[2] : sb[1];
    const std::size_t n = tb ? sb[1] : sb[2];
    if (ka != kb) fail("bmm", "inner extent mismatch " + shape_str(sa) + " x " + shape_str(sb));
    TensorT<T> out({B, m, n});
    for (std::size_t i = 0; i < B; ++i)
        detail::gemm(out.data() + i * m * n, a->value.data() + i * sa[1] * sa[2],
                     b->value.data() + i * sb[1] * sb[2], m, n, ka, ta, tb, false);
    const std::size_t stride_a = sa[1] * sa[2], stride_b = sb[1] * sb[2];
    return make_node<T>(std::move(out), {a, b},
                        [B, m, n, k = ka, ta, tb, stride_a, stride_b](NodeT<T>& n_) {
        const T* g = n_.grad.data();
        const T* va = n_.parents[0]->value.data();
        const T* vb = n_.parents[1]->value.data();
        if (n_.parents[0]->requires_grad) {
            NodeT<T>& p = *n_.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < B; ++i) {
                T* pg = p.grad.data() + i * stride_a;
                const T* gi = g + i * m * n;
                const T* bi = vb + i * stride_b;
                if (!ta) detail::gemm(pg, gi, bi, m, k, n, false, !tb, true);
                else detail::gemm(pg, bi, gi, k, m, n, tb, true, true);
            }
        }
        if (n_.parents[1]->requires_grad) {
            NodeT<T>& p = *n_.parents[1];
            p.ensure_grad();
            for (std::size_t i = 0; i < B; ++i) {
                T* pg = p.grad.data() + i * stride_b;
                const T* gi = g + i * m * n;
                const T* ai = va + i * stride_a;
                if (!tb) detail::gemm(pg, ai, gi, k, n, m, !ta, false, true);
                else detail::gemm(pg, gi, ai, n, k, m, true, ta, true);
            }
        }
    });
}

}  // namespace atrc
