#pragma once

// Deterministic random source. Gaussian and uniform draws are implemented
// here rather than via std::*_distribution, whose output is
// implementation-defined; this keeps seeded runs reproducible per build.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "calr/matrix.hpp"

namespace calr {

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; draws are consumed in pairs.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform index in [0, n) via rejection, bias-free.
  uint64_t index(uint64_t n) {
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t x = engine_();
      if (x >= threshold) return x % n;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  Matrix gaussian_matrix(int rows, int cols, double stddev) {
    Matrix out(rows, cols);
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] = gaussian() * stddev;
    return out;
  }

  Matrix uniform_matrix(int rows, int cols, double lo, double hi) {
    Matrix out(rows, cols);
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] = uniform(lo, hi);
    return out;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Stable derivation of per-component seeds from a run seed.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 step over seed ^ stream tag
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace calr
