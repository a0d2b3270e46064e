#include "spruft/rng.hpp"

#include <cmath>
#include <numbers>

namespace spruft {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t combine_keys(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ (b * 0xD6E8FEB86659FD93ULL)); }

std::uint64_t substream(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return combine_keys(seed, h);
}

std::uint64_t CounterRng::bits(std::uint64_t counter) const { return mix64(key_ ^ mix64(counter)); }

double CounterRng::uniform(std::uint64_t counter) const {
  // 53 random bits, shifted off zero.
  return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::normal(std::uint64_t counter) const {
  const double u1 = uniform(2 * counter);
  const double u2 = uniform(2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t r;
  do {
    r = (*this)();
  } while (r >= limit);
  return r % n;
}

}  // namespace spruft
