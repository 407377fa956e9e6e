#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace e2eloc {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= size_t(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Global toggle: verify op outputs stay finite. Off by default (hot path),
// switched on by the test suites and the NaN-abort path of the trainer.
inline bool& finite_checks() {
    static bool enabled = false;
    return enabled;
}

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
};

template <typename T>
class Tape;

// Dense array handle with shared storage. Values are treated as immutable
// once an op has consumed them; only leaf values (parameters) are mutated,
// and only between tapes.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<T> values) {
        check(shape_numel(shape) == values.size(),
              "tensor: value count " + std::to_string(values.size()) +
                  " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        return t;
    }

    static Tensor zeros(Shape shape) {
        size_t n = shape_numel(shape);
        return constant(std::move(shape), std::vector<T>(n, T(0)));
    }

    static Tensor full(Shape shape, T v) {
        size_t n = shape_numel(shape);
        return constant(std::move(shape), std::vector<T>(n, v));
    }

    static Tensor scalar(T v) { return constant({1}, {v}); }

    static Tensor param(Shape shape, std::vector<T> values) {
        Tensor t = constant(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return int(node_->shape.size()); }
    int dim(int i) const { return node_->shape[size_t(i)]; }
    size_t numel() const { return node_->values.size(); }

    std::vector<T>& values() { return node_->values; }
    const std::vector<T>& values() const { return node_->values; }
    T* data() { return node_->values.data(); }
    const T* data() const { return node_->values.data(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        check(numel() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
        return node_->values[0];
    }

    // Constant copy outside any tape; gradients never flow into it.
    Tensor detach() const {
        Tensor t = constant(node_->shape, node_->values);
        return t;
    }

    Tape<T>* tape() const { return tape_; }
    std::shared_ptr<TensorNode<T>> node() const { return node_; }

  private:
    template <typename U>
    friend class Tape;
    template <typename U>
    friend Tensor<U> make_result(Shape, Tape<U>*, bool);

    std::shared_ptr<TensorNode<T>> node_;
    Tape<T>* tape_ = nullptr;
};

// Ordered record of executed ops: appended in forward execution order, so the
// reverse walk is a valid reverse topological order. One tape == one training
// step, confined to one thread.
template <typename T>
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor<T> leaf(Shape shape, std::vector<T> values, bool requires_grad = false) {
        Tensor<T> t = Tensor<T>::constant(std::move(shape), std::move(values));
        t.node_->requires_grad = requires_grad;
        t.tape_ = this;
        return t;
    }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    // Seeds dLoss/dLoss = 1 and replays the chain rule in reverse. Leaves
    // accumulate the sum of all contributions into their grad buffers.
    void backward(const Tensor<T>& loss) {
        check(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar tensor");
        check(loss.tape() == this, "backward: loss was not recorded on this tape");
        check(!consumed_, "backward: record already replayed; reset() first");
        consumed_ = true;
        loss.node()->ensure_grad();
        loss.node()->grad[0] = T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    void reset() {
        steps_.clear();
        consumed_ = false;
    }

    size_t size() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

  private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
};

template <typename T>
Tensor<T> make_result(Shape shape, Tape<T>* tape, bool requires_grad) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    t.node_->requires_grad = requires_grad;
    t.tape_ = tape;
    return t;
}

namespace detail {

template <typename T>
Tape<T>* pick_tape(Tape<T>* a, Tape<T>* b) {
    if (a && b) check(a == b, "op: operands belong to different tapes");
    return a ? a : b;
}

template <typename T>
void assert_finite(const Tensor<T>& t, const char* op) {
    if (!finite_checks()) return;
    for (T v : t.values())
        if (!std::isfinite(double(v)))
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
}

}  // namespace detail

}  // namespace e2eloc
