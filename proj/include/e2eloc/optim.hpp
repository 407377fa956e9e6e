#pragma once

#include <vector>

#include "e2eloc/tensor.hpp"

namespace e2eloc {

// SGD with classical momentum: v = mu*v + g, p -= lr*v. Updates run
// single-threaded between tapes. A parameter with an all-zero gradient is
// left bit-identical.
template <typename T>
class SgdMomentum {
  public:
    SgdMomentum() = default;
    explicit SgdMomentum(std::vector<Tensor<T>> params, T momentum = T(0.9))
        : params_(std::move(params)), momentum_(momentum) {
        velocity_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i)
            velocity_[i].assign(params_[i].numel(), T(0));
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step(T lr) {
        for (size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].has_grad()) continue;
            auto& v = velocity_[i];
            auto& g = params_[i].grad();
            auto& w = params_[i].values();
            for (size_t k = 0; k < w.size(); ++k) {
                v[k] = momentum_ * v[k] + g[k];
                w[k] -= lr * v[k];
            }
        }
    }

    const std::vector<Tensor<T>>& params() const { return params_; }

  private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    T momentum_ = T(0.9);
};

}  // namespace e2eloc
