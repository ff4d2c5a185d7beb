#pragma once

#include <cstdint>
#include <random>

#include "graded/tensor.hpp"

namespace graded {

// Deterministic stream used by every generator and initializer.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double sd = 1.0) {
    return std::normal_distribution<double>(mean, sd)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t next() { return engine_(); }

  Tensor normal_tensor(std::size_t rows, std::size_t cols, double sd = 1.0) {
    Tensor t(rows, cols);
    for (auto& v : t.data()) v = normal(0.0, sd);
    return t;
  }
  Tensor uniform_tensor(std::size_t rows, std::size_t cols, double lo, double hi) {
    Tensor t(rows, cols);
    for (auto& v : t.data()) v = uniform(lo, hi);
    return t;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Derives an independent child seed; used to give each component its own stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace graded
