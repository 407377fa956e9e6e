#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "e2eloc/ops.hpp"
#include "e2eloc/tensor.hpp"

namespace e2eloc {

// x: (B,Ci,H,W), w: (Co,Ci,kh,kw), b: (Co). Zero padding, square stride.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride = 1,
                 int pad = 0) {
    check(x.ndim() == 4, "conv2d: x must be (B,Ci,H,W), got " + shape_str(x.shape()));
    check(w.ndim() == 4, "conv2d: w must be (Co,Ci,kh,kw), got " + shape_str(w.shape()));
    check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(1) == Ci, "conv2d: channel mismatch");
    check(bias.ndim() == 1 && bias.dim(0) == Co, "conv2d: bias must be (Co)");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    check(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");

    auto c = detail::ctx_of(x, w);
    const bool rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
    Tensor<T> out = make_result<T>({B, Co, Ho, Wo}, c.tape, rg);

    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = bias.data();
    T* po = out.data();
    const size_t in_hw = size_t(H) * size_t(W);
    const size_t out_hw = size_t(Ho) * size_t(Wo);

    for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Co; ++oc) {
            T* obase = po + (size_t(b) * Co + oc) * out_hw;
            std::fill(obase, obase + out_hw, pb[oc]);
            for (int ic = 0; ic < Ci; ++ic) {
                const T* ibase = px + (size_t(b) * Ci + ic) * in_hw;
                const T* wbase = pw + ((size_t(oc) * Ci + ic) * kh) * kw;
                for (int r = 0; r < kh; ++r) {
                    for (int s = 0; s < kw; ++s) {
                        const T wv = wbase[r * kw + s];
                        // valid output range for this kernel offset
                        int ow_lo = 0, ow_hi = Wo;
                        while (ow_lo < Wo && ow_lo * stride + s - pad < 0) ++ow_lo;
                        while (ow_hi > ow_lo && (ow_hi - 1) * stride + s - pad >= W) --ow_hi;
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * stride + r - pad;
                            if (ih < 0 || ih >= H) continue;
                            const T* __restrict irow = ibase + size_t(ih) * W + (s - pad);
                            T* __restrict orow = obase + size_t(oh) * Wo;
                            if (stride == 1) {
                                for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow];
                            } else {
                                for (int ow = ow_lo; ow < ow_hi; ++ow)
                                    orow[ow] += wv * irow[size_t(ow) * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    detail::assert_finite(out, "conv2d");

    if (c.tape != nullptr && rg) {
        c.tape->record([xn = x.node(), wn = w.node(), bn = bias.node(), on = out.node(), B, Ci, Co,
                        H, W, kh, kw, Ho, Wo, stride, pad] {
            if (on->grad.empty()) return;
            const size_t in_hw = size_t(H) * size_t(W);
            const size_t out_hw = size_t(Ho) * size_t(Wo);
            const T* go = on->grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int b = 0; b < B; ++b)
                    for (int oc = 0; oc < Co; ++oc) {
                        const T* grow = go + (size_t(b) * Co + oc) * out_hw;
                        T acc = T(0);
                        for (size_t i = 0; i < out_hw; ++i) acc += grow[i];
                        bn->grad[size_t(oc)] += acc;
                    }
            }
            const bool need_x = xn->requires_grad;
            const bool need_w = wn->requires_grad;
            if (!need_x && !need_w) return;
            if (need_x) xn->ensure_grad();
            if (need_w) wn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                for (int oc = 0; oc < Co; ++oc) {
                    const T* gbase = go + (size_t(b) * Co + oc) * out_hw;
                    for (int ic = 0; ic < Ci; ++ic) {
                        const T* ibase = xn->values.data() + (size_t(b) * Ci + ic) * in_hw;
                        T* gx = need_x ? xn->grad.data() + (size_t(b) * Ci + ic) * in_hw : nullptr;
                        const size_t woff = (size_t(oc) * Ci + ic) * size_t(kh) * kw;
                        for (int r = 0; r < kh; ++r) {
                            for (int s = 0; s < kw; ++s) {
                                const T wv = wn->values[woff + size_t(r) * kw + s];
                                int ow_lo = 0, ow_hi = Wo;
                                while (ow_lo < Wo && ow_lo * stride + s - pad < 0) ++ow_lo;
                                while (ow_hi > ow_lo && (ow_hi - 1) * stride + s - pad >= W)
                                    --ow_hi;
                                T wacc = T(0);
                                for (int oh = 0; oh < Ho; ++oh) {
                                    const int ih = oh * stride + r - pad;
                                    if (ih < 0 || ih >= H) continue;
                                    const T* __restrict grow = gbase + size_t(oh) * Wo;
                                    const size_t ioff = size_t(ih) * W + size_t(s - pad);
                                    if (need_x) {
                                        T* __restrict gxrow = gx + ioff;
                                        if (stride == 1) {
                                            for (int ow = ow_lo; ow < ow_hi; ++ow)
                                                gxrow[ow] += wv * grow[ow];
                                        } else {
                                            for (int ow = ow_lo; ow < ow_hi; ++ow)
                                                gxrow[size_t(ow) * stride] += wv * grow[ow];
                                        }
                                    }
                                    if (need_w) {
                                        const T* __restrict irow = ibase + ioff;
                                        if (stride == 1) {
                                            // four accumulator chains; the
                                            // summation order is fixed, so
                                            // results stay run-reproducible
                                            T a0 = T(0), a1 = T(0), a2 = T(0), a3 = T(0);
                                            int ow = ow_lo;
                                            for (; ow + 3 < ow_hi; ow += 4) {
                                                a0 += irow[ow] * grow[ow];
                                                a1 += irow[ow + 1] * grow[ow + 1];
                                                a2 += irow[ow + 2] * grow[ow + 2];
                                                a3 += irow[ow + 3] * grow[ow + 3];
                                            }
                                            for (; ow < ow_hi; ++ow) a0 += irow[ow] * grow[ow];
                                            wacc += (a0 + a1) + (a2 + a3);
                                        } else {
                                            for (int ow = ow_lo; ow < ow_hi; ++ow)
                                                wacc += irow[size_t(ow) * stride] * grow[ow];
                                        }
                                    }
                                }
                                if (need_w) wn->grad[woff + size_t(r) * kw + s] += wacc;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// x: (B,N), w: (M,N), b: (M) -> (B,M)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    check(x.ndim() == 2, "linear: x must be (B,N), got " + shape_str(x.shape()));
    check(w.ndim() == 2 && w.dim(1) == x.dim(1),
          "linear: w must be (M," + std::to_string(x.dim(1)) + "), got " + shape_str(w.shape()));
    const int B = x.dim(0), N = x.dim(1), M = w.dim(0);
    check(bias.ndim() == 1 && bias.dim(0) == M, "linear: bias must be (M)");

    auto c = detail::ctx_of(x, w);
    const bool rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
    Tensor<T> out = make_result<T>({B, M}, c.tape, rg);
    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = bias.data();
    T* po = out.data();
    for (int b = 0; b < B; ++b) {
        const T* xrow = px + size_t(b) * N;
        T* orow = po + size_t(b) * M;
        for (int m = 0; m < M; ++m) {
            const T* wrow = pw + size_t(m) * N;
            T acc = pb[m];
            for (int n = 0; n < N; ++n) acc += wrow[n] * xrow[n];
            orow[m] = acc;
        }
    }
    detail::assert_finite(out, "linear");

    if (c.tape != nullptr && rg) {
        c.tape->record([xn = x.node(), wn = w.node(), bn = bias.node(), on = out.node(), B, N, M] {
            if (on->grad.empty()) return;
            const T* go = on->grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int b = 0; b < B; ++b)
                    for (int m = 0; m < M; ++m) bn->grad[size_t(m)] += go[size_t(b) * M + m];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int b = 0; b < B; ++b) {
                    T* gx = xn->grad.data() + size_t(b) * N;
                    const T* grow = go + size_t(b) * M;
                    for (int m = 0; m < M; ++m) {
                        const T g = grow[m];
                        const T* wrow = wn->values.data() + size_t(m) * N;
                        for (int n = 0; n < N; ++n) gx[n] += g * wrow[n];
                    }
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (int b = 0; b < B; ++b) {
                    const T* xrow = xn->values.data() + size_t(b) * N;
                    const T* grow = go + size_t(b) * M;
                    for (int m = 0; m < M; ++m) {
                        const T g = grow[m];
                        T* gw = wn->grad.data() + size_t(m) * N;
                        for (int n = 0; n < N; ++n) gw[n] += g * xrow[n];
                    }
                }
            }
        });
    }
    return out;
}

// 2x2 max pool, stride 2; H and W must be even. Ties route to the lowest
// linear index.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
    check(x.ndim() == 4, "maxpool2x2: x must be (B,C,H,W)");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % 2 == 0 && W % 2 == 0, "maxpool2x2: H and W must be even");
    const int Ho = H / 2, Wo = W / 2;
    auto c = detail::ctx_of(x);
    Tensor<T> out = make_result<T>({B, C, Ho, Wo}, c.tape, x.requires_grad());
    const T* px = x.data();
    T* po = out.data();
    const size_t plane = size_t(H) * W;
    const size_t oplane = size_t(Ho) * Wo;
    std::vector<uint32_t> args(c.record ? out.numel() : 0);
    for (int bc = 0; bc < B * C; ++bc) {
        const T* ibase = px + size_t(bc) * plane;
        T* obase = po + size_t(bc) * oplane;
        for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
                const size_t i00 = size_t(2 * oh) * W + 2 * ow;
                size_t best = i00;
                T bv = ibase[i00];
                const size_t cand[3] = {i00 + 1, i00 + W, i00 + W + 1};
                for (size_t k = 0; k < 3; ++k)
                    if (ibase[cand[k]] > bv) {
                        bv = ibase[cand[k]];
                        best = cand[k];
                    }
                obase[size_t(oh) * Wo + ow] = bv;
                if (!args.empty())
                    args[size_t(bc) * oplane + size_t(oh) * Wo + ow] =
                        uint32_t(size_t(bc) * plane + best);
            }
        }
    }
    if (c.record) {
        c.tape->record([xn = x.node(), on = out.node(), args = std::move(args)] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (size_t i = 0; i < args.size(); ++i) xn->grad[args[i]] += on->grad[i];
        });
    }
    return out;
}

// Global average pool over the spatial dims: (B,C,H,W) -> (B,C).
template <typename T>
Tensor<T> gap2d(const Tensor<T>& x) {
    check(x.ndim() == 4, "gap2d: x must be (B,C,H,W)");
    const int B = x.dim(0), C = x.dim(1);
    const size_t hw = size_t(x.dim(2)) * size_t(x.dim(3));
    auto c = detail::ctx_of(x);
    Tensor<T> out = make_result<T>({B, C}, c.tape, x.requires_grad());
    const T inv = T(1) / T(hw);
    const T* px = x.data();
    T* po = out.data();
    for (int bc = 0; bc < B * C; ++bc) {
        const T* row = px + size_t(bc) * hw;
        T acc = T(0);
        for (size_t i = 0; i < hw; ++i) acc += row[i];
        po[bc] = acc * inv;
    }
    detail::assert_finite(out, "gap2d");
    if (c.record) {
        c.tape->record([xn = x.node(), on = out.node(), hw, inv] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const size_t bc_count = on->values.size();
            for (size_t bc = 0; bc < bc_count; ++bc) {
                const T g = on->grad[bc] * inv;
                T* row = xn->grad.data() + bc * hw;
                for (size_t i = 0; i < hw; ++i) row[i] += g;
            }
        });
    }
    return out;
}

enum class PoolAxis {
    kVertical,    // kernel I x 1: collapse rows, per-column max -> length J
    kHorizontal,  // kernel 1 x J: collapse columns, per-row max -> length I
};

// Directional max pooling on a single-channel map (B,1,I,J). Gradient is
// routed to the argmax position; ties resolve to the lowest linear index.
template <typename T>
Tensor<T> directional_max_pool(const Tensor<T>& x, PoolAxis axis) {
    check(x.ndim() == 4 && x.dim(1) == 1,
          "directional_max_pool: x must be (B,1,I,J), got " + shape_str(x.shape()));
    const int B = x.dim(0), I = x.dim(2), J = x.dim(3);
    const int out_len = axis == PoolAxis::kVertical ? J : I;
    auto c = detail::ctx_of(x);
    Tensor<T> out = make_result<T>({B, out_len}, c.tape, x.requires_grad());
    const T* px = x.data();
    T* po = out.data();
    const size_t plane = size_t(I) * J;
    std::vector<uint32_t> args(c.record ? out.numel() : 0);
    for (int b = 0; b < B; ++b) {
        const T* map = px + size_t(b) * plane;
        T* orow = po + size_t(b) * out_len;
        if (axis == PoolAxis::kVertical) {
            for (int j = 0; j < J; ++j) {
                int best_i = 0;
                T bv = map[j];
                for (int i = 1; i < I; ++i)
                    if (map[size_t(i) * J + j] > bv) {
                        bv = map[size_t(i) * J + j];
                        best_i = i;
                    }
                orow[j] = bv;
                if (!args.empty())
                    args[size_t(b) * out_len + j] =
                        uint32_t(size_t(b) * plane + size_t(best_i) * J + j);
            }
        } else {
            for (int i = 0; i < I; ++i) {
                const T* row = map + size_t(i) * J;
                int best_j = 0;
                T bv = row[0];
                for (int j = 1; j < J; ++j)
                    if (row[j] > bv) {
                        bv = row[j];
                        best_j = j;
                    }
                orow[i] = bv;
                if (!args.empty())
                    args[size_t(b) * out_len + i] =
                        uint32_t(size_t(b) * plane + size_t(i) * J + best_j);
            }
        }
    }
    if (c.record) {
        c.tape->record([xn = x.node(), on = out.node(), args = std::move(args)] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (size_t i = 0; i < args.size(); ++i) xn->grad[args[i]] += on->grad[i];
        });
    }
    return out;
}

namespace detail {

// Pixel-center grid mapping (align_corners = false):
// output pixel o reads source pixel  r*(2o+1) + c  with
//   r = scale * Wi / (2*Wo),  c = ((shift + 1 - scale) * Wi - 1) / 2.
// Identity (scale=1, shift=0, Wi=Wo) lands exactly on integer pixels.
template <typename T>
struct AxisMap {
    T r, c;
    AxisMap(T scale, T shift, int in_extent, int out_extent) {
        r = scale * (T(in_extent) / (T(2) * T(out_extent)));
        c = (shift + T(1) - scale) * T(in_extent) * T(0.5) - T(0.5);
    }
    T operator()(int o) const { return r * T(2 * o + 1) + c; }
    // d(src)/d(scale) at output pixel o; d(src)/d(shift) is in_extent/2.
    T dscale(int o, int in_extent, int out_extent) const {
        return T(in_extent) * T(2 * o + 1) / (T(2) * T(out_extent)) - T(in_extent) * T(0.5);
    }
};

}  // namespace detail

// STN-style differentiable crop. theta rows are [s_x, s_y, t_x, t_y] in
// normalized [-1,1] coordinates; source positions outside the image read as
// zero. Differentiable w.r.t. both image and theta.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& theta, int out_h, int out_w) {
    check(x.ndim() == 4, "bilinear_sample: x must be (B,C,H,W)");
    check(theta.ndim() == 2 && theta.dim(1) == 4 && theta.dim(0) == x.dim(0),
          "bilinear_sample: theta must be (B,4)");
    check(out_h >= 1 && out_w >= 1, "bilinear_sample: output size must be >= 1");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto c = detail::ctx_of(x, theta);
    const bool rg = x.requires_grad() || theta.requires_grad();
    Tensor<T> out = make_result<T>({B, C, out_h, out_w}, c.tape, rg);

    const T* px = x.data();
    const T* pth = theta.data();
    T* po = out.data();
    const size_t plane = size_t(H) * W;
    const size_t oplane = size_t(out_h) * out_w;

    auto sample_plane = [&](const T* img, T* dst, const detail::AxisMap<T>& mx,
                            const detail::AxisMap<T>& my) {
        for (int oy = 0; oy < out_h; ++oy) {
            const T sy = my(oy);
            const int y0 = int(std::floor(sy));
            const T wy1 = sy - T(y0);
            T* drow = dst + size_t(oy) * out_w;
            for (int ox = 0; ox < out_w; ++ox) {
                const T sx = mx(ox);
                const int x0 = int(std::floor(sx));
                const T wx1 = sx - T(x0);
                if (wx1 == T(0) && wy1 == T(0)) {
                    drow[ox] = (x0 >= 0 && x0 < W && y0 >= 0 && y0 < H)
                                   ? img[size_t(y0) * W + x0]
                                   : T(0);
                    continue;
                }
                const bool x0in = x0 >= 0 && x0 < W, x1in = x0 + 1 >= 0 && x0 + 1 < W;
                const bool y0in = y0 >= 0 && y0 < H, y1in = y0 + 1 >= 0 && y0 + 1 < H;
                const T v00 = (x0in && y0in) ? img[size_t(y0) * W + x0] : T(0);
                const T v01 = (x1in && y0in) ? img[size_t(y0) * W + x0 + 1] : T(0);
                const T v10 = (x0in && y1in) ? img[size_t(y0 + 1) * W + x0] : T(0);
                const T v11 = (x1in && y1in) ? img[size_t(y0 + 1) * W + x0 + 1] : T(0);
                drow[ox] = (T(1) - wy1) * ((T(1) - wx1) * v00 + wx1 * v01) +
                           wy1 * ((T(1) - wx1) * v10 + wx1 * v11);
            }
        }
    };

    for (int b = 0; b < B; ++b) {
        const detail::AxisMap<T> mx(pth[b * 4 + 0], pth[b * 4 + 2], W, out_w);
        const detail::AxisMap<T> my(pth[b * 4 + 1], pth[b * 4 + 3], H, out_h);
        for (int ch = 0; ch < C; ++ch)
            sample_plane(px + (size_t(b) * C + ch) * plane, po + (size_t(b) * C + ch) * oplane,
                         mx, my);
    }
    detail::assert_finite(out, "bilinear_sample");

    if (c.tape != nullptr && rg) {
        c.tape->record([xn = x.node(), tn = theta.node(), on = out.node(), B, C, H, W, out_h,
                        out_w] {
            if (on->grad.empty()) return;
            const bool need_x = xn->requires_grad;
            const bool need_t = tn->requires_grad;
            if (need_x) xn->ensure_grad();
            if (need_t) tn->ensure_grad();
            const size_t plane = size_t(H) * W;
            const size_t oplane = size_t(out_h) * out_w;
            for (int b = 0; b < B; ++b) {
                const detail::AxisMap<T> mx(tn->values[size_t(b) * 4 + 0],
                                            tn->values[size_t(b) * 4 + 2], W, out_w);
                const detail::AxisMap<T> my(tn->values[size_t(b) * 4 + 1],
                                            tn->values[size_t(b) * 4 + 3], H, out_h);
                T dsx = T(0), dtx = T(0), dsy = T(0), dty = T(0);
                for (int ch = 0; ch < C; ++ch) {
                    const T* img = xn->values.data() + (size_t(b) * C + ch) * plane;
                    const T* grad = on->grad.data() + (size_t(b) * C + ch) * oplane;
                    T* gimg = need_x ? xn->grad.data() + (size_t(b) * C + ch) * plane : nullptr;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const T sy = my(oy);
                        const int y0 = int(std::floor(sy));
                        const T wy1 = sy - T(y0);
                        const T wy0 = T(1) - wy1;
                        for (int ox = 0; ox < out_w; ++ox) {
                            const T g = grad[size_t(oy) * out_w + ox];
                            if (g == T(0)) continue;
                            const T sx = mx(ox);
                            const int x0 = int(std::floor(sx));
                            const T wx1 = sx - T(x0);
                            const T wx0 = T(1) - wx1;
                            const bool x0in = x0 >= 0 && x0 < W, x1in = x0 + 1 < W && x0 + 1 >= 0;
                            const bool y0in = y0 >= 0 && y0 < H, y1in = y0 + 1 < H && y0 + 1 >= 0;
                            const T v00 = (x0in && y0in) ? img[size_t(y0) * W + x0] : T(0);
                            const T v01 = (x1in && y0in) ? img[size_t(y0) * W + x0 + 1] : T(0);
                            const T v10 = (x0in && y1in) ? img[size_t(y0 + 1) * W + x0] : T(0);
                            const T v11 = (x1in && y1in) ? img[size_t(y0 + 1) * W + x0 + 1] : T(0);
                            if (need_x) {
                                if (x0in && y0in) gimg[size_t(y0) * W + x0] += g * wy0 * wx0;
                                if (x1in && y0in) gimg[size_t(y0) * W + x0 + 1] += g * wy0 * wx1;
                                if (x0in && y1in) gimg[size_t(y0 + 1) * W + x0] += g * wy1 * wx0;
                                if (x1in && y1in)
                                    gimg[size_t(y0 + 1) * W + x0 + 1] += g * wy1 * wx1;
                            }
                            if (need_t) {
                                const T dpx = wy0 * (v01 - v00) + wy1 * (v11 - v10);
                                const T dpy = wx0 * (v10 - v00) + wx1 * (v11 - v01);
                                dsx += g * dpx * mx.dscale(ox, W, out_w);
                                dtx += g * dpx * T(W) * T(0.5);
                                dsy += g * dpy * my.dscale(oy, H, out_h);
                                dty += g * dpy * T(H) * T(0.5);
                            }
                        }
                    }
                }
                if (need_t) {
                    tn->grad[size_t(b) * 4 + 0] += dsx;
                    tn->grad[size_t(b) * 4 + 1] += dsy;
                    tn->grad[size_t(b) * 4 + 2] += dtx;
                    tn->grad[size_t(b) * 4 + 3] += dty;
                }
            }
        });
    }
    return out;
}

// Bilinear resize with edge clamping; differentiable w.r.t. the image.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
    check(x.ndim() == 4, "resize_bilinear: x must be (B,C,H,W)");
    check(out_h >= 1 && out_w >= 1, "resize_bilinear: output size must be >= 1");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (out_h == H && out_w == W) return reshape(x, x.shape());  // identity
    auto c = detail::ctx_of(x);
    Tensor<T> out = make_result<T>({B, C, out_h, out_w}, c.tape, x.requires_grad());

    struct Tap {
        int i0, i1;
        T w1;
    };
    auto make_taps = [](int in, int outn) {
        std::vector<Tap> taps(static_cast<size_t>(outn));
        const T ratio = T(in) / T(outn);
        for (int o = 0; o < outn; ++o) {
            T src = (T(o) + T(0.5)) * ratio - T(0.5);
            if (src < T(0)) src = T(0);
            if (src > T(in - 1)) src = T(in - 1);
            int i0 = int(std::floor(src));
            if (i0 > in - 1) i0 = in - 1;
            const int i1 = std::min(i0 + 1, in - 1);
            taps[size_t(o)] = {i0, i1, src - T(i0)};
        }
        return taps;
    };
    const auto tx = make_taps(W, out_w);
    const auto ty = make_taps(H, out_h);

    const T* px = x.data();
    T* po = out.data();
    const size_t plane = size_t(H) * W;
    const size_t oplane = size_t(out_h) * out_w;
    for (int bc = 0; bc < B * C; ++bc) {
        const T* img = px + size_t(bc) * plane;
        T* dst = po + size_t(bc) * oplane;
        for (int oy = 0; oy < out_h; ++oy) {
            const Tap& t_y = ty[size_t(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const Tap& t_x = tx[size_t(ox)];
                const T v00 = img[size_t(t_y.i0) * W + t_x.i0];
                const T v01 = img[size_t(t_y.i0) * W + t_x.i1];
                const T v10 = img[size_t(t_y.i1) * W + t_x.i0];
                const T v11 = img[size_t(t_y.i1) * W + t_x.i1];
                dst[size_t(oy) * out_w + ox] =
                    (T(1) - t_y.w1) * ((T(1) - t_x.w1) * v00 + t_x.w1 * v01) +
                    t_y.w1 * ((T(1) - t_x.w1) * v10 + t_x.w1 * v11);
            }
        }
    }
    detail::assert_finite(out, "resize_bilinear");
    if (c.record) {
        c.tape->record([xn = x.node(), on = out.node(), tx, ty, B, C, H, W, out_h, out_w] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const size_t plane = size_t(H) * W;
            const size_t oplane = size_t(out_h) * out_w;
            for (int bc = 0; bc < B * C; ++bc) {
                T* gimg = xn->grad.data() + size_t(bc) * plane;
                const T* g = on->grad.data() + size_t(bc) * oplane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const Tap& t_y = ty[size_t(oy)];
                    for (int ox = 0; ox < out_w; ++ox) {
                        const Tap& t_x = tx[size_t(ox)];
                        const T gv = g[size_t(oy) * out_w + ox];
                        gimg[size_t(t_y.i0) * W + t_x.i0] += gv * (T(1) - t_y.w1) * (T(1) - t_x.w1);
                        gimg[size_t(t_y.i0) * W + t_x.i1] += gv * (T(1) - t_y.w1) * t_x.w1;
                        gimg[size_t(t_y.i1) * W + t_x.i0] += gv * t_y.w1 * (T(1) - t_x.w1);
                        gimg[size_t(t_y.i1) * W + t_x.i1] += gv * t_y.w1 * t_x.w1;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, int out_h, int out_w) {
    check(x.ndim() == 4, "resize_nearest: x must be (B,C,H,W)");
    check(out_h >= 1 && out_w >= 1, "resize_nearest: output size must be >= 1");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto c = detail::ctx_of(x);
    Tensor<T> out = make_result<T>({B, C, out_h, out_w}, c.tape, x.requires_grad());
    auto src_index = [](int o, int in, int outn) {
        int i = int(std::floor((double(o) + 0.5) * double(in) / double(outn)));
        return std::clamp(i, 0, in - 1);
    };
    std::vector<int> sx(static_cast<size_t>(out_w));
    std::vector<int> sy(static_cast<size_t>(out_h));
    for (int o = 0; o < out_w; ++o) sx[size_t(o)] = src_index(o, W, out_w);
    for (int o = 0; o < out_h; ++o) sy[size_t(o)] = src_index(o, H, out_h);
    const T* px = x.data();
    T* po = out.data();
    const size_t plane = size_t(H) * W;
    const size_t oplane = size_t(out_h) * out_w;
    for (int bc = 0; bc < B * C; ++bc)
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox)
                po[size_t(bc) * oplane + size_t(oy) * out_w + ox] =
                    px[size_t(bc) * plane + size_t(sy[size_t(oy)]) * W + sx[size_t(ox)]];
    if (c.record) {
        c.tape->record([xn = x.node(), on = out.node(), sx, sy, plane, oplane, W, out_h, out_w] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const size_t bc_count = xn->values.size() / plane;
            for (size_t bc = 0; bc < bc_count; ++bc)
                for (int oy = 0; oy < out_h; ++oy)
                    for (int ox = 0; ox < out_w; ++ox)
                        xn->grad[bc * plane + size_t(sy[size_t(oy)]) * W + sx[size_t(ox)]] +=
                            on->grad[bc * oplane + size_t(oy) * out_w + ox];
        });
    }
    return out;
}

// Elementwise smooth L1 (0.5 d^2 for |d| < 1, |d| - 0.5 otherwise), reduced
// by mean. No gradient flows into the target: it must be detached.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target) {
    check(detail::same_shape(pred, target),
          "smooth_l1: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    check(!target.requires_grad(), "smooth_l1: target must be detached");
    auto c = detail::ctx_of(pred);
    Tensor<T> out = make_result<T>({1}, c.tape, pred.requires_grad());
    const size_t n = pred.numel();
    const T* pp = pred.data();
    const T* pt = target.data();
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) {
        const T d = pp[i] - pt[i];
        const T a = std::abs(d);
        acc += a < T(1) ? T(0.5) * d * d : a - T(0.5);
    }
    const T inv = T(1) / T(n);
    out.data()[0] = acc * inv;
    detail::assert_finite(out, "smooth_l1");
    if (c.record) {
        c.tape->record([pn = pred.node(), tn = target.node(), on = out.node(), inv] {
            if (on->grad.empty()) return;
            pn->ensure_grad();
            const T g = on->grad[0] * inv;
            const size_t n = pn->values.size();
            for (size_t i = 0; i < n; ++i) {
                const T d = pn->values[i] - tn->values[i];
                pn->grad[i] += g * (std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1)));
            }
        });
    }
    return out;
}

// Mean negative log-softmax probability of the true class, stabilized by
// max subtraction.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    check(logits.ndim() == 2, "softmax_cross_entropy: logits must be (B,K)");
    const int B = logits.dim(0), K = logits.dim(1);
    check(int(labels.size()) == B, "softmax_cross_entropy: label count mismatch");
    for (int y : labels)
        check(y >= 0 && y < K, "softmax_cross_entropy: label " + std::to_string(y) +
                                   " out of range [0," + std::to_string(K) + ")");
    auto c = detail::ctx_of(logits);
    Tensor<T> out = make_result<T>({1}, c.tape, logits.requires_grad());
    const T* pl = logits.data();
    T acc = T(0);
    for (int b = 0; b < B; ++b) {
        const T* row = pl + size_t(b) * K;
        T m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        T lse = T(0);
        for (int k = 0; k < K; ++k) lse += std::exp(row[k] - m);
        lse = std::log(lse);
        acc += lse - (row[labels[size_t(b)]] - m);
    }
    out.data()[0] = acc / T(B);
    detail::assert_finite(out, "softmax_cross_entropy");
    if (c.record) {
        c.tape->record([ln = logits.node(), on = out.node(), labels, B, K] {
            if (on->grad.empty()) return;
            ln->ensure_grad();
            const T g = on->grad[0] / T(B);
            for (int b = 0; b < B; ++b) {
                const T* row = ln->values.data() + size_t(b) * K;
                T m = row[0];
                for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
                T z = T(0);
                for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
                T* grow = ln->grad.data() + size_t(b) * K;
                for (int k = 0; k < K; ++k) {
                    const T p = std::exp(row[k] - m) / z;
                    grow[k] += g * (p - (k == labels[size_t(b)] ? T(1) : T(0)));
                }
            }
        });
    }
    return out;
}

// Mean squared distance of each embedding to its class center. Centers are
// plain values (no gradient); gradient reaches only the embeddings.
template <typename T>
Tensor<T> center_pull(const Tensor<T>& emb, const std::vector<T>& centers,
                      const std::vector<int>& labels, int num_classes) {
    check(emb.ndim() == 2, "center_pull: embeddings must be (B,D)");
    const int B = emb.dim(0), D = emb.dim(1);
    check(int(labels.size()) == B, "center_pull: label count mismatch");
    check(int(centers.size()) == num_classes * D, "center_pull: centers must be (K,D)");
    for (int y : labels)
        check(y >= 0 && y < num_classes, "center_pull: unseen class id " + std::to_string(y));
    auto c = detail::ctx_of(emb);
    Tensor<T> out = make_result<T>({1}, c.tape, emb.requires_grad());
    const T* pe = emb.data();
    T acc = T(0);
    for (int b = 0; b < B; ++b) {
        const T* e = pe + size_t(b) * D;
        const T* ctr = centers.data() + size_t(labels[size_t(b)]) * D;
        for (int d = 0; d < D; ++d) {
            const T diff = e[d] - ctr[d];
            acc += diff * diff;
        }
    }
    out.data()[0] = acc / T(B);
    detail::assert_finite(out, "center_pull");
    if (c.record) {
        c.tape->record([en = emb.node(), on = out.node(), centers, labels, B, D] {
            if (on->grad.empty()) return;
            en->ensure_grad();
            const T g = on->grad[0] * T(2) / T(B);
            for (int b = 0; b < B; ++b) {
                const T* ctr = centers.data() + size_t(labels[size_t(b)]) * D;
                T* ge = en->grad.data() + size_t(b) * D;
                const T* e = en->values.data() + size_t(b) * D;
                for (int d = 0; d < D; ++d) ge[d] += g * (e[d] - ctr[d]);
            }
        });
    }
    return out;
}

}  // namespace e2eloc
