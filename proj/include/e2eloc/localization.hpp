#pragma once

#include <string>
#include <vector>

#include "e2eloc/layers.hpp"
#include "e2eloc/nn.hpp"
#include "e2eloc/ops.hpp"
#include "e2eloc/rng.hpp"
#include "e2eloc/tensor.hpp"

// The localization pathway: AttNet predicts an attention map from a
// down-sized view of the input, the pre-processing module normalizes and
// soft-binarizes it, and AffNet regresses the affine crop parameters from
// directionally pooled profiles.

namespace e2eloc {

struct AttNetConfig {
    int in_channels = 1;
    int input_size = 64;  // square input after down-sizing
    int width1 = 16;
    int width2 = 32;
    bool residual_block = true;
    int map_h = 16;
    int map_w = 16;
};

struct PreprocessConfig {
    double tau = 0.3;       // initial value of the learnable threshold w_tau
    double steepness = 10;  // fixed binarization steepness k
    double epsilon = 1e-6;  // guards the min-max division on constant maps
    // 2*sigmoid(k t)-1 keeps thresholded-to-zero positions exactly at zero;
    // the raw sigmoid variant maps them to 0.5 instead.
    bool zero_centered = true;
};

struct AffNetConfig {
    int map_h = 16;
    int map_w = 16;
    int hidden = 128;
};

// Two stride-2 conv stages (plus an optional residual block) and a 1x1 head:
// input_size x input_size -> map of input_size/4, single channel.
template <typename T>
struct AttNet {
    AttNetConfig cfg;
    Conv2dLayer<T> stem, res1, res2, mid, head;

    AttNet() = default;
    AttNet(const AttNetConfig& c, Rng& rng) : cfg(c) {
        check(c.input_size % 4 == 0 && c.input_size / 4 == c.map_h && c.map_h == c.map_w,
              "AttNet: input size " + std::to_string(c.input_size) +
                  " does not reduce to the configured map size");
        stem = Conv2dLayer<T>(c.in_channels, c.width1, 3, 2, 1, rng);
        if (c.residual_block) {
            res1 = Conv2dLayer<T>(c.width1, c.width1, 3, 1, 1, rng);
            res2 = Conv2dLayer<T>(c.width1, c.width1, 3, 1, 1, rng);
        }
        mid = Conv2dLayer<T>(c.width1, c.width2, 3, 2, 1, rng);
        head = Conv2dLayer<T>(c.width2, 1, 1, 1, 0, rng);
    }

    Tensor<T> forward(const Tensor<T>& image) const {
        check(image.dim(2) == cfg.input_size && image.dim(3) == cfg.input_size,
              "AttNet: input must be resized to " + std::to_string(cfg.input_size));
        auto h = relu(stem(image));
        if (cfg.residual_block) h = relu(add(h, res2(relu(res1(h)))));
        h = relu(mid(h));
        return head(h);
    }

    void collect(std::vector<Tensor<T>>& out) {
        stem.collect(out);
        if (cfg.residual_block) {
            res1.collect(out);
            res2.collect(out);
        }
        mid.collect(out);
        head.collect(out);
    }
};

// Differentiable min-max normalization, thresholding (subtract + ReLU) and
// soft binarization (scale + sigmoid). w_tau is the single learnable
// parameter.
template <typename T>
struct Preprocess {
    PreprocessConfig cfg;
    Tensor<T> w_tau;

    Preprocess() = default;
    explicit Preprocess(const PreprocessConfig& c) : cfg(c) {
        check(c.tau > 0.0 && c.tau < 1.0, "Preprocess: tau must be in (0,1)");
        check(c.steepness > 0.0, "Preprocess: steepness must be positive");
        w_tau = Tensor<T>::param({1}, {T(c.tau)});
    }

    Tensor<T> forward(const Tensor<T>& A) const {
        auto mn = min_per_sample(A);
        auto mx = max_per_sample(A);
        auto range = add_scalar(sub(mx, mn), T(cfg.epsilon));
        auto normed = div_rowwise(sub_rowwise(A, mn), range);
        auto thresholded = relu(sub_broadcast_scalar(normed, w_tau));
        auto soft = sigmoid(mul_scalar(thresholded, T(cfg.steepness)));
        if (!cfg.zero_centered) return soft;
        return add_scalar(mul_scalar(soft, T(2)), T(-1));
    }

    // Samples whose map is constant (max == min) come out all-zero; the
    // trainer reports them in diagnostics.
    static int count_constant_maps(const Tensor<T>& A) {
        const int B = A.dim(0);
        const size_t rest = A.numel() / size_t(B);
        int n = 0;
        for (int b = 0; b < B; ++b) {
            const T* row = A.data() + size_t(b) * rest;
            T mn = row[0], mx = row[0];
            for (size_t i = 1; i < rest; ++i) {
                mn = std::min(mn, row[i]);
                mx = std::max(mx, row[i]);
            }
            if (!(mx > mn)) ++n;
        }
        return n;
    }

    void collect(std::vector<Tensor<T>>& out) { out.push_back(w_tau); }
};

// Directional max pooling followed by the two heads NN_h and NN_v; each is
// linear(128) + ReLU + linear(2). For a 16x16 map this is 4868 parameters.
template <typename T>
struct AffNet {
    AffNetConfig cfg;
    LinearLayer<T> h1, h2;  // NN_h: (s_x, t_x) from the length-J profile
    LinearLayer<T> v1, v2;  // NN_v: (s_y, t_y) from the length-I profile

    AffNet() = default;
    AffNet(const AffNetConfig& c, Rng& rng) : cfg(c) {
        check(c.map_h >= 2 && c.map_w >= 2, "AffNet: map size must be >= 2");
        h1 = LinearLayer<T>(c.map_w, c.hidden, rng);
        h2 = LinearLayer<T>(c.hidden, 2, rng);
        v1 = LinearLayer<T>(c.map_h, c.hidden, rng);
        v2 = LinearLayer<T>(c.hidden, 2, rng);
        init_identity_heads();
    }

    // Output-layer weights zero, bias (1, 0) for (scale, translation): the
    // initial affine transformation is exactly the identity.
    void init_identity_heads() {
        std::fill(h2.w.values().begin(), h2.w.values().end(), T(0));
        std::fill(v2.w.values().begin(), v2.w.values().end(), T(0));
        h2.b.values() = {T(1), T(0)};
        v2.b.values() = {T(1), T(0)};
    }

    Tensor<T> forward(const Tensor<T>& P) const {
        check(P.dim(2) == cfg.map_h && P.dim(3) == cfg.map_w,
              "AffNet: map size mismatch, got " + shape_str(P.shape()));
        auto hprof = directional_max_pool(P, PoolAxis::kVertical);    // (B, J)
        auto vprof = directional_max_pool(P, PoolAxis::kHorizontal);  // (B, I)
        auto h = h2(relu(h1(hprof)));
        auto v = v2(relu(v1(vprof)));
        return make_theta(h, v);
    }

    void collect(std::vector<Tensor<T>>& out) {
        h1.collect(out);
        h2.collect(out);
        v1.collect(out);
        v2.collect(out);
    }
};

// Re-initializes AffNet (hidden layers random, identity output heads) and
// resets w_tau to its configured initial threshold.
template <typename T>
void init_identity(AffNet<T>& affnet, Preprocess<T>* prep, Rng& rng) {
    affnet.h1 = LinearLayer<T>(affnet.cfg.map_w, affnet.cfg.hidden, rng);
    affnet.v1 = LinearLayer<T>(affnet.cfg.map_h, affnet.cfg.hidden, rng);
    affnet.h2 = LinearLayer<T>(affnet.cfg.hidden, 2, rng);
    affnet.v2 = LinearLayer<T>(affnet.cfg.hidden, 2, rng);
    affnet.init_identity_heads();
    if (prep) prep->w_tau.values() = {T(prep->cfg.tau)};
}

template <typename T>
struct LocalizeOut {
    Tensor<T> crop;
    Tensor<T> theta;      // ungated: local supervision attaches here
    Tensor<T> attention;  // ungated: local supervision attaches here
};

// Full localization pathway. beta_att gates every gradient flowing back into
// the attention map from downstream consumers (AffNet and the classifier);
// beta_aff gates the gradient flowing back into theta from the crop.
template <typename T>
struct Localizer {
    AttNet<T> attnet;
    Preprocess<T> prep;
    AffNet<T> affnet;
    int crop_h = 64, crop_w = 64;

    Localizer() = default;
    Localizer(const AttNetConfig& ac, const PreprocessConfig& pc, const AffNetConfig& fc,
              int crop_size, Rng& rng)
        : attnet(ac, rng), prep(pc), affnet(fc, rng), crop_h(crop_size), crop_w(crop_size) {
        check(ac.map_h == fc.map_h && ac.map_w == fc.map_w,
              "Localizer: AttNet map size does not match AffNet input size");
    }

    LocalizeOut<T> forward(const Tensor<T>& image, T beta_att, T beta_aff) const {
        Tensor<T> att_in = image;
        if (image.dim(2) != attnet.cfg.input_size || image.dim(3) != attnet.cfg.input_size)
            att_in = resize_bilinear(image, attnet.cfg.input_size, attnet.cfg.input_size);
        auto A = attnet.forward(att_in);
        auto P = prep.forward(grad_scale(A, beta_att));
        auto theta = affnet.forward(P);
        auto crop = bilinear_sample(image, grad_scale(theta, beta_aff), crop_h, crop_w);
        return {crop, theta, A};
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        attnet.collect(out);
        prep.collect(out);
        affnet.collect(out);
        return out;
    }
};

}  // namespace e2eloc
