#pragma once

#include <cmath>
#include <vector>

#include "e2eloc/nn.hpp"
#include "e2eloc/rng.hpp"
#include "e2eloc/tensor.hpp"

namespace e2eloc {

// Uniform init scaled by fan-in: U[-1/sqrt(fan_in), 1/sqrt(fan_in)].
template <typename T>
std::vector<T> fan_in_uniform(Rng& rng, size_t n, size_t fan_in) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    std::vector<T> v(n);
    for (auto& x : v) x = T(rng.uniform(-bound, bound));
    return v;
}

template <typename T>
struct Conv2dLayer {
    Tensor<T> w, b;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(int ci, int co, int k, int stride_, int pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        const size_t fan_in = size_t(ci) * k * k;
        w = Tensor<T>::param({co, ci, k, k}, fan_in_uniform<T>(rng, size_t(co) * fan_in, fan_in));
        b = Tensor<T>::param({co}, fan_in_uniform<T>(rng, size_t(co), fan_in));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(std::vector<Tensor<T>>& out) {
        out.push_back(w);
        out.push_back(b);
    }
};

template <typename T>
struct LinearLayer {
    Tensor<T> w, b;

    LinearLayer() = default;
    LinearLayer(int in, int out, Rng& rng) {
        w = Tensor<T>::param({out, in}, fan_in_uniform<T>(rng, size_t(out) * in, size_t(in)));
        b = Tensor<T>::param({out}, fan_in_uniform<T>(rng, size_t(out), size_t(in)));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }

    void collect(std::vector<Tensor<T>>& out) {
        out.push_back(w);
        out.push_back(b);
    }
};

template <typename T>
size_t count_params(const std::vector<Tensor<T>>& params) {
    size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
}

}  // namespace e2eloc
