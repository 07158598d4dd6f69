#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "stylelab/precision.hpp"

namespace stylelab {
STYLELAB_BEGIN_PRECISION

// Seeded generator used everywhere randomness enters. std::mt19937_64 plus
// libstdc++'s distributions give bit-identical streams for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  // Integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

  std::vector<real> normal_vector(std::size_t n, double stddev = 1.0) {
    std::vector<real> out(n);
    for (auto& v : out) v = static_cast<real>(normal() * stddev);
    return out;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// Derives an independent stream seed from a base seed and a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

STYLELAB_END_PRECISION
}  // namespace stylelab
