#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace lmvar {

// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. The std:: distributions are implementation-defined, so the
// variates below are derived from raw engine output to keep runs identical
// across standard libraries.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Per-purpose stream seed: derive_seed(master, "shuffle", epoch) etc.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                                 std::uint64_t index = 0) {
  std::uint64_t s = splitmix64(master);
  s = splitmix64(s ^ fnv1a64(purpose));
  return splitmix64(s ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

inline Rng make_rng(std::uint64_t master, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(master, purpose, index));
}

// Uniform on [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Unbiased integer in [0, n) by rejection.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

inline double standard_normal(Rng& rng) {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// log of a Gamma(shape, 1) variate (Marsaglia-Tsang). Returned in log space
// because small shapes underflow to exact zeros otherwise.
inline double log_gamma_variate(Rng& rng, double shape) {
  if (shape < 1.0) {
    const double boosted = log_gamma_variate(rng, shape + 1.0);
    const double u = 1.0 - uniform01(rng);
    return boosted + std::log(u) / shape;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x, v;
    do {
      x = standard_normal(rng);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - uniform01(rng);
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return std::log(d * v);
  }
}

template <class T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace lmvar
