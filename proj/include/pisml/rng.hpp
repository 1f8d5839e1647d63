#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "pisml/common.hpp"

namespace pisml {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derives an independent seed for a named substream ("dataset", "init",
/// "dropout", "distill", ...) from a single root seed.
inline std::uint64_t stream_seed(std::uint64_t root, std::string_view name) {
  return splitmix64(root ^ splitmix64(fnv1a64(name)));
}

inline std::uint64_t stream_seed(std::uint64_t root, std::string_view name,
                                 std::uint64_t index) {
  return splitmix64(stream_seed(root, name) + splitmix64(index + 1));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::string_view name) {
  return Rng(stream_seed(root, name));
}

/// Uniform draw in [lo, hi) that does not depend on the standard library's
/// distribution implementation.
inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  const double unit = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * unit;
}

/// Standard normal via Box-Muller on `uniform`.
inline double normal(Rng& rng) {
  double u1 = uniform(rng);
  while (u1 <= 0.0) u1 = uniform(rng);
  const double u2 = uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

}  // namespace pisml
