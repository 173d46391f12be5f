#pragma once

// Deterministic RNG. Distributions are implemented explicitly on top of
// mt19937_64 output so that a seed pins the generated stream exactly,
// independent of standard-library distribution internals.

#include <cmath>
#include <cstdint>
#include <random>

#include "simvos/tensor.hpp"

namespace simvos {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (one value per call, cached pair).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal(0, std) truncated to +-2 std by resampling.
  double trunc_normal(double stddev) {
    double v = normal();
    while (std::abs(v) > 2.0) v = normal();
    return v * stddev;
  }

  template <typename S>
  void fill_uniform(Tensor<S>& t, double lo, double hi) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
  }

  template <typename S>
  void fill_normal(Tensor<S>& t, double stddev) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal() * stddev);
  }

  template <typename S>
  void fill_trunc_normal(Tensor<S>& t, double stddev) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(trunc_normal(stddev));
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace simvos
