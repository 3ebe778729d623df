#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "realcustom/tensor.hpp"

namespace realcustom {

/// Counter-based generator. Draw number `n` (0-based) of a stream is
///
///   splitmix64_mix(seed + (n + 1) * 0x9E3779B97F4A7C15)
///
/// i.e. SplitMix64 evaluated at an explicit counter, so a (seed, counter)
/// pair fully determines every later draw on every platform. Normals use
/// Box-Muller (cosine branch) and consume two draws each.
class Rng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * kGolden);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const auto wide = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(wide >> 64);
  }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream; `split(k)` is a pure function of (seed, k).
  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + kGolden)));
  }

  template <typename T = float>
  BasicTensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(stddev * normal());
    return t;
  }

  template <typename T = float>
  BasicTensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace realcustom
