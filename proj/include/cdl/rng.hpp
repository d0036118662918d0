#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cdl {

// Deterministic random stream. All randomness in the library flows through
// explicit Rng instances so that a (seed, purpose) pair reproduces the same
// draw sequence bit-for-bit on every platform. The uniform/normal transforms
// are implemented by hand on top of mt19937_64 because the std distribution
// objects are not specified bit-exactly by the standard.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // log-uniform over [lo, hi], lo > 0
  double log_uniform(double lo, double hi);

  // Standard normal via Box-Muller; one spare cached per pair.
  double normal();

  int uniform_int(int lo, int hi);  // inclusive bounds, unbiased enough for tests/shuffles

  // Combines tags into a well-mixed sub-seed (splitmix64 over the sequence).
  static std::uint64_t mix(std::initializer_list<std::uint64_t> parts);

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cdl
