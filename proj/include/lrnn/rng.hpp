// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace lrnn {

/// Counter-based generator: the i-th output is SplitMix64's finalizer applied to
/// `key + (i + 1) * 0x9E3779B97F4A7C15`. Only integer arithmetic is involved, so
/// a (seed, call sequence) pair yields the same 64-bit stream on every platform.
/// Independent substreams are keyed by mixing extra identifiers into the key.
class Rng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x6A09E667F3BCC909ULL)), seed_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * kGolden);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n), Lemire's multiply-and-reject.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    std::uint64_t x = next_u64();
    unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        x = next_u64();
        m = static_cast<unsigned __int128>(x) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Standard normal via Box-Muller (one draw per call, the sine branch is dropped).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Deterministic child stream identified by (a, b); does not advance this stream.
  Rng substream(std::uint64_t a, std::uint64_t b = 0) const {
    Rng child(0);
    child.key_ = mix(key_ ^ mix(a + kGolden) ^ mix(mix(b) + 0x3C6EF372FE94F82BULL));
    child.seed_ = seed_;
    return child;
  }

 private:
  std::uint64_t key_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace lrnn
