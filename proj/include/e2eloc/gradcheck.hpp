#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "e2eloc/rng.hpp"
#include "e2eloc/tensor.hpp"

// Central finite-difference oracle for reverse-mode gradients, used by the
// test suites and the grad-check command. The builder reconstructs the
// scalar loss from leaf values on a fresh tape, so the same closure serves
// both the analytic pass and the perturbed re-evaluations.

namespace e2eloc::fdcheck {

struct LeafSpec {
    Shape shape;
    std::vector<double> values;
};

using BuildFn =
    std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t checked = 0;
    size_t skipped = 0;  // probes rejected by the kink guard
    double loss = 0.0;
};

// Relative error with a floor: gradients below the floor in magnitude are
// held to an absolute tolerance instead of a vanishing denominator.
inline double rel_err(double a, double f, double floor_) {
    const double denom = std::max({std::abs(a), std::abs(f), floor_});
    return std::abs(a - f) / denom;
}

struct GradCheckOptions {
    int probes_per_leaf = 0;  // 0 = every element
    double h = 1e-5;
    double denom_floor = 1e-4;
    // When set, each probe is evaluated at steps h and 2h; probes whose two
    // estimates disagree are crossing a non-smooth seam (max tie, ReLU zero,
    // interpolation cell boundary) where the FD oracle itself is invalid,
    // and are skipped. A genuine gradient bug yields consistent FD values
    // and is still flagged.
    bool kink_guard = false;
    double kink_tol = 5e-3;
};

inline GradCheckReport grad_check(std::vector<LeafSpec> leaves, const BuildFn& build,
                                  Rng& rng, const GradCheckOptions& opt = {}) {
    auto eval = [&](std::vector<LeafSpec>& ls, std::vector<std::vector<double>>* grads) {
        Tape<double> tape;
        std::vector<Tensor<double>> ts;
        ts.reserve(ls.size());
        for (auto& l : ls) ts.push_back(tape.leaf(l.shape, l.values, /*requires_grad=*/true));
        Tensor<double> loss = build(tape, ts);
        const double lv = loss.item();
        if (grads) {
            tape.backward(loss);
            grads->clear();
            for (auto& t : ts) grads->push_back(t.grad());
        }
        return lv;
    };

    std::vector<std::vector<double>> analytic;
    GradCheckReport rep;
    rep.loss = eval(leaves, &analytic);

    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li].values;
        std::vector<size_t> idx(vals.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (opt.probes_per_leaf > 0 && size_t(opt.probes_per_leaf) < idx.size()) {
            rng.shuffle(idx);
            idx.resize(size_t(opt.probes_per_leaf));
        }
        for (size_t i : idx) {
            const double orig = vals[i];
            auto fd_at = [&](double h) {
                vals[i] = orig + h;
                const double lp = eval(leaves, nullptr);
                vals[i] = orig - h;
                const double lm = eval(leaves, nullptr);
                vals[i] = orig;
                return (lp - lm) / (2.0 * h);
            };
            const double fd = fd_at(opt.h);
            if (opt.kink_guard) {
                const double fd2 = fd_at(2.0 * opt.h);
                if (rel_err(fd, fd2, opt.denom_floor) > opt.kink_tol) {
                    ++rep.skipped;
                    continue;
                }
            }
            rep.max_rel_err =
                std::max(rep.max_rel_err, rel_err(analytic[li][i], fd, opt.denom_floor));
            ++rep.checked;
        }
    }
    return rep;
}

// Convenience overload used throughout the unit tests.
inline GradCheckReport grad_check(std::vector<LeafSpec> leaves, const BuildFn& build,
                                  Rng& rng, int probes_per_leaf, double h = 1e-5,
                                  double denom_floor = 1e-4) {
    GradCheckOptions opt;
    opt.probes_per_leaf = probes_per_leaf;
    opt.h = h;
    opt.denom_floor = denom_floor;
    return grad_check(std::move(leaves), build, rng, opt);
}

inline std::vector<double> rand_vec(Rng& rng, size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Values bounded away from zero on both sides; safe through relu and abs.
inline std::vector<double> rand_vec_signed(Rng& rng, size_t n, double lo = 0.2,
                                           double hi = 1.5) {
    std::vector<double> v(n);
    for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
    return v;
}

// Resamples until all values are pairwise separated; keeps max/min style
// reductions away from ties that a finite-difference step could flip.
inline std::vector<double> rand_vec_distinct(Rng& rng, size_t n, double lo, double hi,
                                             double min_gap = 1e-3) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        std::vector<double> v = rand_vec(rng, n, lo, hi);
        std::vector<double> s = v;
        std::sort(s.begin(), s.end());
        bool ok = true;
        for (size_t i = 1; i < s.size(); ++i)
            if (s[i] - s[i - 1] < min_gap) {
                ok = false;
                break;
            }
        if (ok) return v;
    }
    throw std::runtime_error("rand_vec_distinct: could not find a spaced sample");
}

}  // namespace e2eloc::fdcheck
