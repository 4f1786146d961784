#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ega {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Hash of a (seed, stream, counter, slot) key. Pure function, identical on every platform.
constexpr std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter,
                                     std::uint64_t slot = 0) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ mix64(stream + 0x632be59bd9b4e019ULL));
  h = mix64(h ^ mix64(counter + 0x8cb92ba72f3d8dd7ULL));
  return mix64(h ^ mix64(slot + 0x2545f4914f6cdd1dULL));
}

/// Named sub-streams so independent consumers never share draws.
enum class Stream : std::uint64_t {
  kInit = 1,
  kTrainBatch = 2,
  kEvalBatch = 3,
  kDropout = 4,
  kSample = 5,
  kTest = 6,
};

/// Counter-based generator: the n-th draw is mix64(key + n). Uses no library distributions,
/// so draws are bitwise reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t key = 0) : key_(key) {}
  Rng(std::uint64_t seed, Stream stream, std::uint64_t counter = 0)
      : key_(counter_hash(seed, static_cast<std::uint64_t>(stream), counter)) {}

  std::uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ULL * (++counter_)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Rng fork(std::uint64_t tag) const { return Rng(mix64(key_ ^ mix64(tag + counter_))); }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace ega
