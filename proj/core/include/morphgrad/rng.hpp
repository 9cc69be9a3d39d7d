#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace morphgrad {

/// Deterministic random source. Wraps mt19937_64 but derives all variates
/// with fixed arithmetic instead of std::*_distribution, whose output is
/// implementation-defined; the same seed yields the same stream on every
/// build of this library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller (the cosine branch only, so the state
  /// advance per call is fixed).
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free modulo is biased for huge n; n here is always small
    // (indices, voxel counts), so 64-bit modulo bias is negligible and,
    // more importantly, deterministic.
    return engine_() % n;
  }

  /// Derive an independent child stream; used for per-fold / per-sample
  /// seeding so concurrent work stays reproducible.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace morphgrad
