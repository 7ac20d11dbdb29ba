#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>

namespace hvtsurv {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Expands one user seed into independent per-purpose streams. The purpose
/// tag is hashed with FNV-1a so the rule is stable across platforms.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed ^ h) + index);
}

inline Rng make_rng(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, purpose, index));
}

/// Uniform double in [0, 1) from the top 53 bits; unlike
/// std::uniform_real_distribution the result is identical on every standard
/// library.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Unbiased integer in [0, n) by rejection.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

/// Fisher-Yates with `uniform_index`, portable where std::shuffle is not.
template <class It>
void portable_shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = uniform_index(rng, i);
    std::swap(first[i - 1], first[j]);
  }
}

/// Box-Muller standard normal.
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace hvtsurv
