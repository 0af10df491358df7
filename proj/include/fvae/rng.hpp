#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "fvae/tensor.hpp"

namespace fvae {

// Counter-based random stream. A draw is a pure function of (seed, counter),
// so the full state is two integers and resuming from a checkpoint replays
// the exact sequence.
class RngStream {
  public:
    explicit RngStream(uint64_t seed, uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (++counter_);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; consumes exactly two uniforms per draw.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t) {
        for (auto& v : t.data) v = static_cast<T>(uniform());
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, T stddev = T(1)) {
        for (auto& v : t.data) v = static_cast<T>(normal()) * stddev;
    }

    template <typename T>
    Tensor<T> normal_tensor(Shape shape, T stddev = T(1)) {
        Tensor<T> t(std::move(shape));
        fill_normal(t, stddev);
        return t;
    }

    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        std::iota(p.begin(), p.end(), 0);
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = static_cast<int64_t>(next_u64() % static_cast<uint64_t>(i + 1));
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

  private:
    uint64_t seed_;
    uint64_t counter_;
};

}  // namespace fvae
