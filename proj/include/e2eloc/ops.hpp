#pragma once

#include <algorithm>
#include <cmath>

#include "e2eloc/tensor.hpp"

// Primitive differentiable operations. Conventions shared by all ops:
//  - the result inherits the tape of its operands (operands on two different
//    tapes is an error) and requires_grad if any operand does;
//  - a backward step is recorded only when both a tape and a grad requirement
//    are present;
//  - a node whose grad buffer is still empty at replay time received no
//    downstream contribution, and its step is a no-op;
//  - ties in argmin/argmax resolve to the lowest linear index.

namespace e2eloc {

namespace detail {

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape();
}

template <typename T>
struct OpCtx {
    Tape<T>* tape;
    bool record;
};

template <typename T>
OpCtx<T> ctx_of(const Tensor<T>& a) {
    return {a.tape(), a.tape() != nullptr && a.requires_grad()};
}

template <typename T>
OpCtx<T> ctx_of(const Tensor<T>& a, const Tensor<T>& b) {
    Tape<T>* t = pick_tape(a.tape(), b.tape());
    return {t, t != nullptr && (a.requires_grad() || b.requires_grad())};
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check(detail::same_shape(a, b), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto c = detail::ctx_of(a, b);
    Tensor<T> out = make_result<T>(a.shape(), c.tape, a.requires_grad() || b.requires_grad());
    const size_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    detail::assert_finite(out, "add");
    if (c.record) {
        c.tape->record([an = a.node(), bn = b.node(), on = out.node()] {
            if (on->grad.empty()) return;
            const size_t n = on->values.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check(detail::same_shape(a, b), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto c = detail::ctx_of(a, b);
    Tensor<T> out = make_result<T>(a.shape(), c.tape, a.requires_grad() || b.requires_grad());
    const size_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    detail::assert_finite(out, "sub");
    if (c.record) {
        c.tape->record([an = a.node(), bn = b.node(), on = out.node()] {
            if (on->grad.empty()) return;
            const size_t n = on->values.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check(detail::same_shape(a, b), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto c = detail::ctx_of(a, b);
    Tensor<T> out = make_result<T>(a.shape(), c.tape, a.requires_grad() || b.requires_grad());
    const size_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    detail::assert_finite(out, "mul");
    if (c.record) {
        c.tape->record([an = a.node(), bn = b.node(), on = out.node()] {
            if (on->grad.empty()) return;
            const size_t n = on->values.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->values[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->values[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
    check(detail::same_shape(a, b), "divide: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto c = detail::ctx_of(a, b);
    Tensor<T> out = make_result<T>(a.shape(), c.tape, a.requires_grad() || b.requires_grad());
    const size_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
    detail::assert_finite(out, "divide");
    if (c.record) {
        c.tape->record([an = a.node(), bn = b.node(), on = out.node()] {
            if (on->grad.empty()) return;
            const size_t n = on->values.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] / bn->values[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n; ++i)
                    bn->grad[i] -= on->grad[i] * on->values[i] / bn->values[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    auto c = detail::ctx_of(a);
    Tensor<T> out = make_result<T>(a.shape(), c.tape, a.requires_grad());
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] + s;
    detail::assert_finite(out, "add_scalar");
    if (c.record) {
        c.tape->record([an = a.node(), on = out.node()] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const size_t n = on->values.size();
            for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    auto c = detail::ctx_of(a);
    Tensor<T> out = make_result<T>(a.shape(), c.tape, a.requires_grad());
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    detail::assert_finite(out, "mul_scalar");
    if (c.record) {
        c.tape->record([an = a.node(), on = out.node(), s] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const size_t n = on->values.size();
            for (size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * s;
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    auto c = detail::ctx_of(a);
    Tensor<T> out = make_result<T>(a.shape(), c.tape, a.requires_grad());
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
    if (c.record) {
        c.tape->record([an = a.node(), on = out.node()] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const size_t n = on->values.size();
            for (size_t i = 0; i < n; ++i)
                if (an->values[i] > T(0)) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    auto c = detail::ctx_of(a);
    Tensor<T> out = make_result<T>(a.shape(), c.tape, a.requires_grad());
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = T(1) / (T(1) + std::exp(-pa[i]));
    detail::assert_finite(out, "sigmoid");
    if (c.record) {
        c.tape->record([an = a.node(), on = out.node()] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const size_t n = on->values.size();
            for (size_t i = 0; i < n; ++i) {
                const T y = on->values[i];
                an->grad[i] += on->grad[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    auto c = detail::ctx_of(a);
    Tensor<T> out = make_result<T>({1}, c.tape, a.requires_grad());
    T acc = T(0);
    for (T v : a.values()) acc += v;
    out.data()[0] = acc;
    detail::assert_finite(out, "sum_all");
    if (c.record) {
        c.tape->record([an = a.node(), on = out.node()] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const T g = on->grad[0];
            for (auto& gi : an->grad) gi += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    auto c = detail::ctx_of(a);
    Tensor<T> out = make_result<T>({1}, c.tape, a.requires_grad());
    T acc = T(0);
    for (T v : a.values()) acc += v;
    const T inv = T(1) / T(a.numel());
    out.data()[0] = acc * inv;
    detail::assert_finite(out, "mean_all");
    if (c.record) {
        c.tape->record([an = a.node(), on = out.node(), inv] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            const T g = on->grad[0] * inv;
            for (auto& gi : an->grad) gi += g;
        });
    }
    return out;
}

namespace detail {

template <typename T, bool kMax>
Tensor<T> extremum_all(const Tensor<T>& a, const char* name) {
    check(a.numel() > 0, std::string(name) + ": empty tensor");
    auto c = ctx_of(a);
    Tensor<T> out = make_result<T>({1}, c.tape, a.requires_grad());
    const T* pa = a.data();
    size_t arg = 0;
    for (size_t i = 1; i < a.numel(); ++i)
        if (kMax ? pa[i] > pa[arg] : pa[i] < pa[arg]) arg = i;
    out.data()[0] = pa[arg];
    if (c.record) {
        c.tape->record([an = a.node(), on = out.node(), arg] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            an->grad[arg] += on->grad[0];
        });
    }
    return out;
}

template <typename T, bool kMax>
Tensor<T> extremum_per_sample(const Tensor<T>& a, const char* name) {
    check(a.ndim() >= 2, std::string(name) + ": needs a batch dimension");
    const int batch = a.dim(0);
    const size_t rest = a.numel() / size_t(batch);
    check(rest > 0, std::string(name) + ": empty sample");
    auto c = ctx_of(a);
    Tensor<T> out = make_result<T>({batch}, c.tape, a.requires_grad());
    const T* pa = a.data();
    std::vector<size_t> args(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        const T* row = pa + size_t(b) * rest;
        size_t arg = 0;
        for (size_t i = 1; i < rest; ++i)
            if (kMax ? row[i] > row[arg] : row[i] < row[arg]) arg = i;
        args[size_t(b)] = size_t(b) * rest + arg;
        out.data()[b] = row[arg];
    }
    if (c.record) {
        c.tape->record([an = a.node(), on = out.node(), args = std::move(args)] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (size_t b = 0; b < args.size(); ++b) an->grad[args[b]] += on->grad[b];
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> max_all(const Tensor<T>& a) {
    return detail::extremum_all<T, true>(a, "max_all");
}

template <typename T>
Tensor<T> min_all(const Tensor<T>& a) {
    return detail::extremum_all<T, false>(a, "min_all");
}

// Reduce over everything but the batch dimension; shape (B, ...) -> (B).
template <typename T>
Tensor<T> max_per_sample(const Tensor<T>& a) {
    return detail::extremum_per_sample<T, true>(a, "max_per_sample");
}

template <typename T>
Tensor<T> min_per_sample(const Tensor<T>& a) {
    return detail::extremum_per_sample<T, false>(a, "min_per_sample");
}

namespace detail {

template <typename T, bool kDiv>
Tensor<T> rowwise_binary(const Tensor<T>& x, const Tensor<T>& v, const char* name) {
    check(x.ndim() >= 2, std::string(name) + ": x needs a batch dimension");
    check(v.ndim() == 1 && v.dim(0) == x.dim(0),
          std::string(name) + ": v must have shape (batch)");
    const int batch = x.dim(0);
    const size_t rest = x.numel() / size_t(batch);
    auto c = ctx_of(x, v);
    Tensor<T> out = make_result<T>(x.shape(), c.tape, x.requires_grad() || v.requires_grad());
    const T* px = x.data();
    const T* pv = v.data();
    T* po = out.data();
    for (int b = 0; b < batch; ++b) {
        const T s = pv[b];
        const T* row = px + size_t(b) * rest;
        T* orow = po + size_t(b) * rest;
        if (kDiv)
            for (size_t i = 0; i < rest; ++i) orow[i] = row[i] / s;
        else
            for (size_t i = 0; i < rest; ++i) orow[i] = row[i] - s;
    }
    detail::assert_finite(out, name);
    if (c.record) {
        c.tape->record([xn = x.node(), vn = v.node(), on = out.node(), batch, rest] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) xn->ensure_grad();
            if (vn->requires_grad) vn->ensure_grad();
            for (int b = 0; b < batch; ++b) {
                const size_t off = size_t(b) * rest;
                if (kDiv) {
                    const T s = vn->values[size_t(b)];
                    if (xn->requires_grad)
                        for (size_t i = 0; i < rest; ++i) xn->grad[off + i] += on->grad[off + i] / s;
                    if (vn->requires_grad) {
                        T acc = T(0);
                        for (size_t i = 0; i < rest; ++i)
                            acc += on->grad[off + i] * xn->values[off + i];
                        vn->grad[size_t(b)] -= acc / (s * s);
                    }
                } else {
                    if (xn->requires_grad)
                        for (size_t i = 0; i < rest; ++i) xn->grad[off + i] += on->grad[off + i];
                    if (vn->requires_grad) {
                        T acc = T(0);
                        for (size_t i = 0; i < rest; ++i) acc += on->grad[off + i];
                        vn->grad[size_t(b)] -= acc;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

// out[b, ...] = x[b, ...] - v[b]
template <typename T>
Tensor<T> sub_rowwise(const Tensor<T>& x, const Tensor<T>& v) {
    return detail::rowwise_binary<T, false>(x, v, "sub_rowwise");
}

// out[b, ...] = x[b, ...] / v[b]
template <typename T>
Tensor<T> div_rowwise(const Tensor<T>& x, const Tensor<T>& v) {
    return detail::rowwise_binary<T, true>(x, v, "div_rowwise");
}

// out = x - s[0], with s a learnable scalar tensor (shape {1}).
template <typename T>
Tensor<T> sub_broadcast_scalar(const Tensor<T>& x, const Tensor<T>& s) {
    check(s.numel() == 1, "sub_broadcast_scalar: s must be scalar");
    auto c = detail::ctx_of(x, s);
    Tensor<T> out = make_result<T>(x.shape(), c.tape, x.requires_grad() || s.requires_grad());
    const T sv = s.data()[0];
    const size_t n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = px[i] - sv;
    detail::assert_finite(out, "sub_broadcast_scalar");
    if (c.record) {
        c.tape->record([xn = x.node(), sn = s.node(), on = out.node()] {
            if (on->grad.empty()) return;
            const size_t n = on->values.size();
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                T acc = T(0);
                for (size_t i = 0; i < n; ++i) acc += on->grad[i];
                sn->grad[0] -= acc;
            }
        });
    }
    return out;
}

// Mean over the channel dimension: (B,C,H,W) -> (B,1,H,W).
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
    check(x.ndim() == 4, "channel_mean: expected (B,C,H,W), got " + shape_str(x.shape()));
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto c = detail::ctx_of(x);
    Tensor<T> out = make_result<T>({B, 1, H, W}, c.tape, x.requires_grad());
    const size_t hw = size_t(H) * size_t(W);
    const T inv = T(1) / T(C);
    const T* px = x.data();
    T* po = out.data();
    for (int b = 0; b < B; ++b) {
        T* orow = po + size_t(b) * hw;
        for (int ch = 0; ch < C; ++ch) {
            const T* row = px + (size_t(b) * size_t(C) + size_t(ch)) * hw;
            for (size_t i = 0; i < hw; ++i) orow[i] += row[i];
        }
        for (size_t i = 0; i < hw; ++i) orow[i] *= inv;
    }
    detail::assert_finite(out, "channel_mean");
    if (c.record) {
        c.tape->record([xn = x.node(), on = out.node(), B, C, hw, inv] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const T* grow = on->grad.data() + size_t(b) * hw;
                for (int ch = 0; ch < C; ++ch) {
                    T* xrow = xn->grad.data() + (size_t(b) * size_t(C) + size_t(ch)) * hw;
                    for (size_t i = 0; i < hw; ++i) xrow[i] += grow[i] * inv;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    check(shape_numel(shape) == x.numel(),
          "reshape: element count mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto c = detail::ctx_of(x);
    Tensor<T> out = make_result<T>(std::move(shape), c.tape, x.requires_grad());
    out.values() = x.values();
    if (c.record) {
        c.tape->record([xn = x.node(), on = out.node()] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const size_t n = on->values.size();
            for (size_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

// (B, ...) -> (B, prod(rest))
template <typename T>
Tensor<T> flatten2d(const Tensor<T>& x) {
    check(x.ndim() >= 2, "flatten2d: needs a batch dimension");
    const int B = x.dim(0);
    return reshape(x, {B, int(x.numel() / size_t(B))});
}

// Identity forward; backward multiplies the through-flowing gradient by beta.
// Gradients from losses attached directly to the input are unaffected.
template <typename T>
Tensor<T> grad_scale(const Tensor<T>& x, T beta) {
    check(beta >= T(0), "grad_scale: beta must be >= 0");
    auto c = detail::ctx_of(x);
    Tensor<T> out = make_result<T>(x.shape(), c.tape, x.requires_grad());
    out.values() = x.values();
    if (c.record) {
        c.tape->record([xn = x.node(), on = out.node(), beta] {
            if (on->grad.empty() || beta == T(0)) return;
            xn->ensure_grad();
            const size_t n = on->values.size();
            for (size_t i = 0; i < n; ++i) xn->grad[i] += beta * on->grad[i];
        });
    }
    return out;
}

// Interleave the two head outputs into theta rows [s_x, s_y, t_x, t_y].
// h holds (s_x, t_x), v holds (s_y, t_y).
template <typename T>
Tensor<T> make_theta(const Tensor<T>& h, const Tensor<T>& v) {
    check(h.ndim() == 2 && h.dim(1) == 2, "make_theta: h must be (B,2)");
    check(v.ndim() == 2 && v.dim(1) == 2 && v.dim(0) == h.dim(0), "make_theta: v must be (B,2)");
    const int B = h.dim(0);
    auto c = detail::ctx_of(h, v);
    Tensor<T> out = make_result<T>({B, 4}, c.tape, h.requires_grad() || v.requires_grad());
    const T* ph = h.data();
    const T* pv = v.data();
    T* po = out.data();
    for (int b = 0; b < B; ++b) {
        po[b * 4 + 0] = ph[b * 2 + 0];
        po[b * 4 + 1] = pv[b * 2 + 0];
        po[b * 4 + 2] = ph[b * 2 + 1];
        po[b * 4 + 3] = pv[b * 2 + 1];
    }
    if (c.record) {
        c.tape->record([hn = h.node(), vn = v.node(), on = out.node(), B] {
            if (on->grad.empty()) return;
            if (hn->requires_grad) hn->ensure_grad();
            if (vn->requires_grad) vn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                if (hn->requires_grad) {
                    hn->grad[size_t(b) * 2 + 0] += on->grad[size_t(b) * 4 + 0];
                    hn->grad[size_t(b) * 2 + 1] += on->grad[size_t(b) * 4 + 2];
                }
                if (vn->requires_grad) {
                    vn->grad[size_t(b) * 2 + 0] += on->grad[size_t(b) * 4 + 1];
                    vn->grad[size_t(b) * 2 + 1] += on->grad[size_t(b) * 4 + 3];
                }
            }
        });
    }
    return out;
}

}  // namespace e2eloc
