#include <cmath>

#include "doctest.h"
#include "e2eloc/nn.hpp"
#include "e2eloc/rng.hpp"
#include "e2eloc/gradcheck.hpp"

using namespace e2eloc;
using e2eloc::fdcheck::grad_check;
using e2eloc::fdcheck::LeafSpec;
using e2eloc::fdcheck::rand_vec;
using e2eloc::fdcheck::rand_vec_distinct;

namespace {

// Naive reference convolution used as oracle against the blocked kernel.
std::vector<double> conv2d_ref(const std::vector<double>& x, int B, int Ci, int H, int W,
                               const std::vector<double>& w, int Co, int kh, int kw,
                               const std::vector<double>& bias, int stride, int pad) {
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> out(size_t(B) * Co * Ho * Wo);
    for (int b = 0; b < B; ++b)
        for (int oc = 0; oc < Co; ++oc)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = bias[size_t(oc)];
                    for (int ic = 0; ic < Ci; ++ic)
                        for (int r = 0; r < kh; ++r)
                            for (int s = 0; s < kw; ++s) {
                                const int ih = oh * stride + r - pad;
                                const int iw = ow * stride + s - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += w[((size_t(oc) * Ci + ic) * kh + r) * kw + s] *
                                       x[((size_t(b) * Ci + ic) * H + ih) * W + iw];
                            }
                    out[((size_t(b) * Co + oc) * Ho + oh) * Wo + ow] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("conv2d matches the naive reference") {
    Rng rng(21);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
        const int B = 2, Ci = 3, H = 6, W = 5, Co = 4, kh = 3, kw = 3;
        auto xv = rand_vec(rng, size_t(B) * Ci * H * W, -1.0, 1.0);
        auto wv = rand_vec(rng, size_t(Co) * Ci * kh * kw, -1.0, 1.0);
        auto bv = rand_vec(rng, size_t(Co), -0.5, 0.5);
        Tape<double> tape;
        auto x = tape.leaf({B, Ci, H, W}, xv, false);
        auto w = Tensor<double>::constant({Co, Ci, kh, kw}, wv);
        auto b = Tensor<double>::constant({Co}, bv);
        auto y = conv2d(x, w, b, stride, pad);
        auto ref = conv2d_ref(xv, B, Ci, H, W, wv, Co, kh, kw, bv, stride, pad);
        REQUIRE(y.numel() == ref.size());
        for (size_t i = 0; i < ref.size(); ++i) CHECK(y.values()[i] == doctest::Approx(ref[i]));
    }
}

TEST_CASE("conv2d gradients: all three leaves") {
    Rng rng(22);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}}) {
        const int B = 1, Ci = 2, H = 5, W = 4, Co = 2, kh = 3, kw = 3;
        std::vector<LeafSpec> leaves{
            {{B, Ci, H, W}, rand_vec(rng, size_t(B) * Ci * H * W, -1.0, 1.0)},
            {{Co, Ci, kh, kw}, rand_vec(rng, size_t(Co) * Ci * kh * kw, -1.0, 1.0)},
            {{Co}, rand_vec(rng, size_t(Co), -0.5, 0.5)}};
        auto rep = grad_check(
            leaves,
            [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
                auto y = conv2d(ts[0], ts[1], ts[2], stride, pad);
                return mean_all(mul(y, y));
            },
            rng);
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("linear forward and gradients") {
    Rng rng(23);
    const int B = 3, N = 5, M = 4;
    auto xv = rand_vec(rng, size_t(B) * N, -1.0, 1.0);
    auto wv = rand_vec(rng, size_t(M) * N, -1.0, 1.0);
    auto bv = rand_vec(rng, size_t(M), -0.5, 0.5);
    {
        Tape<double> tape;
        auto y = linear(tape.leaf({B, N}, xv, false), Tensor<double>::constant({M, N}, wv),
                        Tensor<double>::constant({M}, bv));
        for (int b = 0; b < B; ++b)
            for (int m = 0; m < M; ++m) {
                double acc = bv[size_t(m)];
                for (int n = 0; n < N; ++n)
                    acc += wv[size_t(m) * N + n] * xv[size_t(b) * N + n];
                CHECK(y.values()[size_t(b) * M + m] == doctest::Approx(acc));
            }
    }
    std::vector<LeafSpec> leaves{{{B, N}, xv}, {{M, N}, wv}, {{M}, bv}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            auto y = linear(ts[0], ts[1], ts[2]);
            return mean_all(mul(y, y));
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("maxpool2x2 forward and gradient") {
    Rng rng(24);
    auto vals = rand_vec_distinct(rng, 2 * 4 * 4, -1.0, 1.0);
    {
        Tape<double> tape;
        auto x = tape.leaf({1, 2, 4, 4}, vals, false);
        auto y = maxpool2x2(x);
        REQUIRE(y.shape() == Shape{1, 2, 2, 2});
        for (int c = 0; c < 2; ++c)
            for (int oh = 0; oh < 2; ++oh)
                for (int ow = 0; ow < 2; ++ow) {
                    double m = -1e30;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            m = std::max(m, vals[size_t(c) * 16 + size_t(2 * oh + dy) * 4 +
                                                 size_t(2 * ow + dx)]);
                    CHECK(y.values()[size_t(c) * 4 + size_t(oh) * 2 + ow] == m);
                }
    }
    std::vector<LeafSpec> leaves{{{1, 2, 4, 4}, vals}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            return mean_all(maxpool2x2(ts[0]));
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("directional_max_pool: constant and single-hot maps") {
    {
        Tape<double> tape;
        auto x = tape.leaf({1, 1, 4, 6}, std::vector<double>(24, 0.7), false);
        auto pv = directional_max_pool(x, PoolAxis::kVertical);
        auto ph = directional_max_pool(x, PoolAxis::kHorizontal);
        for (double v : pv.values()) CHECK(v == 0.7);
        for (double v : ph.values()) CHECK(v == 0.7);
    }
    {
        // hot pixel at row 2, column 5 of an 8x8 map
        std::vector<double> vals(64, 0.0);
        vals[2 * 8 + 5] = 1.0;
        Tape<double> tape;
        auto x = tape.leaf({1, 1, 8, 8}, vals, false);
        auto col_max = directional_max_pool(x, PoolAxis::kVertical);   // length 8
        auto row_max = directional_max_pool(x, PoolAxis::kHorizontal); // length 8
        for (int j = 0; j < 8; ++j) CHECK(col_max.values()[size_t(j)] == (j == 5 ? 1.0 : 0.0));
        for (int i = 0; i < 8; ++i) CHECK(row_max.values()[size_t(i)] == (i == 2 ? 1.0 : 0.0));
    }
}

TEST_CASE("directional_max_pool equals brute force on random maps") {
    Rng rng(25);
    for (int trial = 0; trial < 20; ++trial) {
        auto vals = rand_vec(rng, 2 * 16 * 16, -1.0, 1.0);
        Tape<double> tape;
        auto x = tape.leaf({2, 1, 16, 16}, vals, false);
        auto v = directional_max_pool(x, PoolAxis::kVertical);
        auto h = directional_max_pool(x, PoolAxis::kHorizontal);
        for (int b = 0; b < 2; ++b) {
            for (int j = 0; j < 16; ++j) {
                double m = -1e30;
                for (int i = 0; i < 16; ++i)
                    m = std::max(m, vals[size_t(b) * 256 + size_t(i) * 16 + j]);
                CHECK(v.values()[size_t(b) * 16 + j] == m);
            }
            for (int i = 0; i < 16; ++i) {
                double m = -1e30;
                for (int j = 0; j < 16; ++j)
                    m = std::max(m, vals[size_t(b) * 256 + size_t(i) * 16 + j]);
                CHECK(h.values()[size_t(b) * 16 + i] == m);
            }
        }
    }
}

TEST_CASE("directional_max_pool gradient") {
    Rng rng(26);
    std::vector<LeafSpec> leaves{{{1, 1, 6, 6}, rand_vec_distinct(rng, 36, -1.0, 1.0)}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            auto v = directional_max_pool(ts[0], PoolAxis::kVertical);
            auto h = directional_max_pool(ts[0], PoolAxis::kHorizontal);
            return add(mean_all(mul(v, v)), mean_all(mul(h, h)));
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gap2d") {
    Rng rng(27);
    auto vals = rand_vec(rng, 2 * 3 * 4 * 4, -1.0, 1.0);
    Tape<double> tape;
    auto y = gap2d(tape.leaf({2, 3, 4, 4}, vals, false));
    for (int bc = 0; bc < 6; ++bc) {
        double acc = 0.0;
        for (int i = 0; i < 16; ++i) acc += vals[size_t(bc) * 16 + i];
        CHECK(y.values()[size_t(bc)] == doctest::Approx(acc / 16.0));
    }
    std::vector<LeafSpec> leaves{{{2, 3, 4, 4}, vals}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            auto g = gap2d(ts[0]);
            return mean_all(mul(g, g));
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("bilinear_sample: identity theta reproduces the input bit-exactly") {
    Rng rng(31);
    for (auto [h, w] : {std::pair{4, 4}, std::pair{7, 5}, std::pair{16, 16}, std::pair{1, 3}}) {
        auto vals = rand_vec(rng, size_t(2) * 1 * h * w, 0.0, 1.0);
        Tape<double> tape;
        auto x = tape.leaf({2, 1, h, w}, vals, false);
        auto theta = Tensor<double>::constant({2, 4}, {1, 1, 0, 0, 1, 1, 0, 0});
        auto y = bilinear_sample(x, theta, h, w);
        CHECK(y.values() == vals);
    }
}

TEST_CASE("bilinear_sample: centered half crop of a 4x4 ramp") {
    // Image values v(r,c) = 4r + c. With theta (0.5, 0.5, 0, 0) output pixel
    // ox reads source pixel px = s*(2*ox+1)*Wi/(2*Wo) + ((t+1-s)*Wi-1)/2
    //                          = 0.25*(2*ox+1) + 0.5, i.e. {0.75,1.25,1.75,2.25};
    // same for py. Bilinear interpolation of a linear ramp is exact: 4*py+px.
    std::vector<double> vals(16);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) vals[size_t(r) * 4 + c] = 4.0 * r + c;
    Tape<double> tape;
    auto x = tape.leaf({1, 1, 4, 4}, vals, false);
    auto theta = Tensor<double>::constant({1, 4}, {0.5, 0.5, 0.0, 0.0});
    auto y = bilinear_sample(x, theta, 4, 4);
    for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 4; ++ox) {
            const double px = 0.25 * (2 * ox + 1) + 0.5;
            const double py = 0.25 * (2 * oy + 1) + 0.5;
            CHECK(y.values()[size_t(oy) * 4 + ox] == doctest::Approx(4.0 * py + px));
        }
}

TEST_CASE("bilinear_sample: grid fully outside reads zero padding") {
    Rng rng(32);
    auto vals = rand_vec(rng, 36, 0.5, 1.0);
    Tape<double> tape;
    auto x = tape.leaf({1, 1, 6, 6}, vals, false);
    auto theta = Tensor<double>::constant({1, 4}, {1.0, 1.0, 2.0, 0.0});
    auto y = bilinear_sample(x, theta, 6, 6);
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("bilinear_sample gradients w.r.t. image and theta") {
    Rng rng(33);
    std::vector<LeafSpec> leaves{{{1, 2, 5, 6}, rand_vec(rng, 60, 0.0, 1.0)},
                                 {{1, 4}, {0.63, 0.71, 0.13, -0.09}}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            auto y = bilinear_sample(ts[0], ts[1], 4, 3);
            return mean_all(mul(y, y));
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("resize ops") {
    Rng rng(34);
    auto vals = rand_vec(rng, 2 * 8 * 8, 0.0, 1.0);
    {
        // same-size resize is the identity
        Tape<double> tape;
        auto x = tape.leaf({1, 2, 8, 8}, vals, false);
        CHECK(resize_bilinear(x, 8, 8).values() == vals);
    }
    {
        // 2x nearest upsample repeats pixels
        Tape<double> tape;
        auto x = tape.leaf({1, 2, 8, 8}, vals, false);
        auto y = resize_nearest(x, 16, 16);
        for (int c = 0; c < 2; ++c)
            for (int oy = 0; oy < 16; ++oy)
                for (int ox = 0; ox < 16; ++ox)
                    CHECK(y.values()[size_t(c) * 256 + size_t(oy) * 16 + ox] ==
                          vals[size_t(c) * 64 + size_t(oy / 2) * 8 + ox / 2]);
    }
    std::vector<LeafSpec> leaves{{{1, 1, 6, 6}, rand_vec(rng, 36, 0.0, 1.0)}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            auto y = resize_bilinear(ts[0], 4, 4);
            return mean_all(mul(y, y));
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
    auto rep_n = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            auto y = resize_nearest(ts[0], 4, 4);
            return mean_all(mul(y, y));
        },
        rng);
    CHECK(rep_n.max_rel_err < 1e-4);
}

TEST_CASE("smooth_l1 closed-form values") {
    auto loss_of = [](double pred, double target) {
        Tape<double> tape;
        auto p = tape.leaf({1}, {pred}, false);
        auto t = Tensor<double>::constant({1}, {target});
        return smooth_l1(p, t).item();
    };
    CHECK(loss_of(3.7, 3.7) == 0.0);
    CHECK(loss_of(0.5, 0.0) == doctest::Approx(0.125));
    CHECK(loss_of(2.0, 0.0) == doctest::Approx(1.5));
    CHECK(loss_of(-2.0, 0.0) == doctest::Approx(1.5));
}

TEST_CASE("smooth_l1 contract") {
    Rng rng(35);
    {
        Tape<double> tape;
        auto p = tape.leaf({3}, {1.0, 2.0, 3.0}, false);
        auto t = Tensor<double>::constant({2}, {1.0, 2.0});
        CHECK_THROWS(smooth_l1(p, t));  // shape mismatch
        auto tr = Tensor<double>::param({3}, {1.0, 2.0, 3.0});
        CHECK_THROWS(smooth_l1(p, tr));  // target not detached
    }
    for (int trial = 0; trial < 10; ++trial) {
        Tape<double> tape;
        auto pv = rand_vec(rng, 9, -3.0, 3.0);
        auto tv = rand_vec(rng, 9, -3.0, 3.0);
        auto v = smooth_l1(tape.leaf({9}, pv, false), Tensor<double>::constant({9}, tv)).item();
        CHECK(v >= 0.0);
    }
    // gradient, with residuals kept away from the |d|=1 seams
    std::vector<LeafSpec> leaves{{{6}, {0.4, -0.6, 1.6, -2.2, 0.05, 3.0}}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            return smooth_l1(ts[0], Tensor<double>::zeros({6}));
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("softmax_cross_entropy values and stability") {
    {
        Tape<double> tape;
        auto logits = tape.leaf({1, 4}, {0.3, 0.3, 0.3, 0.3}, false);
        CHECK(softmax_cross_entropy(logits, {2}).item() == doctest::Approx(std::log(4.0)));
    }
    {
        Tape<double> tape;
        auto logits = tape.leaf({1, 2}, {1000.0, 0.0}, false);
        const double v = softmax_cross_entropy(logits, {0}).item();
        CHECK(std::isfinite(v));
        CHECK(v == doctest::Approx(0.0));
    }
    {
        Tape<double> tape;
        auto logits = tape.leaf({1, 3}, {0.0, 0.0, 0.0}, false);
        CHECK_THROWS(softmax_cross_entropy(logits, {3}));
        CHECK_THROWS(softmax_cross_entropy(logits, {-1}));
    }
    // random batch vs direct formula
    Rng rng(36);
    auto lv = rand_vec(rng, 15, -2.0, 2.0);
    std::vector<int> labels{4, 0, 2};
    Tape<double> tape;
    auto loss = softmax_cross_entropy(tape.leaf({3, 5}, lv, false), labels);
    double want = 0.0;
    for (int b = 0; b < 3; ++b) {
        double z = 0.0;
        for (int k = 0; k < 5; ++k) z += std::exp(lv[size_t(b) * 5 + k]);
        want += -std::log(std::exp(lv[size_t(b) * 5 + labels[size_t(b)]]) / z);
    }
    CHECK(loss.item() == doctest::Approx(want / 3.0));
    // gradient
    std::vector<LeafSpec> leaves{{{3, 5}, lv}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            return softmax_cross_entropy(ts[0], labels);
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("center_pull value and gradient") {
    Rng rng(37);
    const int B = 4, D = 3, K = 3;
    auto ev = rand_vec(rng, size_t(B) * D, -1.0, 1.0);
    std::vector<double> centers = rand_vec(rng, size_t(K) * D, -1.0, 1.0);
    std::vector<int> labels{0, 2, 1, 2};
    {
        Tape<double> tape;
        auto loss = center_pull(tape.leaf({B, D}, ev, false), centers, labels, K);
        double want = 0.0;
        for (int b = 0; b < B; ++b)
            for (int d = 0; d < D; ++d) {
                const double diff = ev[size_t(b) * D + d] - centers[size_t(labels[size_t(b)]) * D + d];
                want += diff * diff;
            }
        CHECK(loss.item() == doctest::Approx(want / B));
    }
    {
        Tape<double> tape;
        CHECK_THROWS(center_pull(tape.leaf({B, D}, ev, false), centers, {0, 1, 2, 3}, K));
    }
    std::vector<LeafSpec> leaves{{{B, D}, ev}};
    auto rep = grad_check(
        leaves,
        [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
            return center_pull(ts[0], centers, labels, K);
        },
        rng);
    CHECK(rep.max_rel_err < 1e-4);
}
