#pragma once

// Counter-based SplitMix64 generator.
//
// The n-th output of a stream seeded with s is mix(s + n * 0x9E3779B97F4A7C15),
// where mix is the SplitMix64 finalizer. All distributions below are built on
// top of that sequence with explicit arithmetic, so results are bit-identical
// across compilers and platforms (std::*_distribution makes no such promise).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace chronoformer {

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

class Rng {
 public:
  static constexpr std::uint64_t kIncrement = 0x9E3779B97F4A7C15ULL;

  explicit constexpr Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {}

  /// Independent stream identified by a fixed label ("init", "mask", ...).
  [[nodiscard]] constexpr Rng derive(std::string_view label) const noexcept {
    return Rng(splitmix64_mix(seed_ ^ splitmix64_mix(fnv1a64(label))));
  }
  [[nodiscard]] constexpr Rng derive(std::uint64_t index) const noexcept {
    return Rng(splitmix64_mix(seed_ + splitmix64_mix(index + 0x632BE59BD9B4E019ULL)));
  }

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return splitmix64_mix(seed_ + counter_ * kIncrement);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection (unbiased).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached spare, so draws stay counter-aligned).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  [[nodiscard]] constexpr std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace chronoformer
