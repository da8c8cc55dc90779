#pragma once

#include <cstdint>

namespace alps {

// SplitMix64 (Steele, Lea, Flood 2014; reference code by S. Vigna).
// Same seed, same stream on every platform.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  result_type operator()() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, bound) by rejection, so no modulo bias.
  std::uint64_t below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % bound;
  }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from (seed, salt).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
  SplitMix64 mix(seed ^ (salt * 0xD1B54A32D192ED03ULL));
  mix();
  return mix();
}

}  // namespace alps
