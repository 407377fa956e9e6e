#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace e2eloc {

// splitmix64; used to derive independent stream seeds from (seed, index).
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t stream_seed(uint64_t seed, uint64_t index) {
    return mix64(mix64(seed) ^ (index * 0x9e3779b97f4a7c15ull + 0x165667b19e3779f9ull));
}

// mt19937_64 with hand-rolled distributions. The std:: distributions are
// implementation-defined, so sampling goes through these helpers to keep
// generated data bit-stable across standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n), n > 0; rejection sampling, unbiased
    uint64_t uniform_int(uint64_t n) {
        const uint64_t limit = ~uint64_t(0) - ~uint64_t(0) % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    int uniform_index(int n) { return int(uniform_int(uint64_t(n))); }

    // Box-Muller, one value per call (the sibling is discarded)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    template <typename T>
    void fill_uniform(std::vector<T>& v, double lo, double hi) {
        for (auto& x : v) x = T(uniform(lo, hi));
    }

  private:
    std::mt19937_64 gen_;
};

}  // namespace e2eloc
