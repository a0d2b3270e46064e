#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace spruft {

/// Counter-based generator: every draw is a pure function of (key, counter),
/// so any coordinate of a random stream can be regenerated without storing it.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t key() const { return key_; }
  std::uint64_t bits(std::uint64_t counter) const;
  /// Uniform on the open interval (0, 1).
  double uniform(std::uint64_t counter) const;
  /// Standard normal (Box-Muller over two derived uniforms).
  double normal(std::uint64_t counter) const;

 private:
  std::uint64_t key_;
};

std::uint64_t mix64(std::uint64_t x);
/// Combines two key parts; order matters.
std::uint64_t combine_keys(std::uint64_t a, std::uint64_t b);
/// Named substream of a run seed ("data", "init", "dropout", "spsa", ...).
std::uint64_t substream(std::uint64_t seed, std::string_view name);

/// Sequential view over a CounterRng; usable as a UniformRandomBitGenerator.
class RngStream {
 public:
  using result_type = std::uint64_t;
  explicit RngStream(std::uint64_t key) : rng_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return rng_.bits(counter_++); }

  double uniform() { return rng_.uniform(counter_++); }
  double normal() { return rng_.normal(counter_++); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  CounterRng rng_;
  std::uint64_t counter_ = 0;
};

}  // namespace spruft
