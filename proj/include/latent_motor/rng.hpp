#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace latent_motor {

/// Purposes that get their own independent random stream.
enum class Stream : std::uint64_t {
  kInit = 1,
  kEnv = 2,
  kPolicy = 3,
  kNoise = 4,
  kCem = 5,
  kEval = 6,
  kReplay = 7,
};

/// Counter-based generator. Draw k of a stream is a pure function of
/// (seed, stream, k), so a stream is restored exactly from those three
/// numbers and child streams never overlap their parent.
///
/// Satisfies UniformRandomBitGenerator. Uniform and normal variates are
/// produced here rather than through <random> distributions, whose output
/// is implementation-defined.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter), key_(mix(seed ^ mix(stream + kGolden))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + kGolden * ++counter_); }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(operator()() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(operator()()) * n) >> 64);
  }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream. Does not advance this generator.
  Rng split(std::uint64_t purpose) const { return Rng(seed_, mix(stream_ ^ mix(purpose + 1))); }
  Rng split(Stream purpose) const { return split(static_cast<std::uint64_t>(purpose)); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.seed_ == b.seed_ && a.stream_ == b.stream_ && a.counter_ == b.counter_;
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  // splitmix64 finalizer
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
  std::uint64_t key_;
};

}  // namespace latent_motor
