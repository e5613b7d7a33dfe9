#pragma once

// Deterministic, platform-independent random streams.
//
// Every subsystem draws from its own stream whose key is derived from the run
// seed and a purpose tag: key = mix(seed ^ fnv1a(tag)). Streams are
// counter-based (the n-th draw is a pure function of key and n), so results
// do not depend on thread scheduling or draw interleaving between streams.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "pcq/matrix.hpp"

namespace pcq {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept {
  return splitmix64(seed ^ fnv1a64(tag));
}

// Uniform in the open interval (0, 1) from the top 53 bits.
inline double to_unit_open(std::uint64_t bits) noexcept {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

class Stream {
public:
  explicit Stream(std::uint64_t key, std::uint64_t counter = 0) noexcept
      : key_(key), counter_(counter) {}

  std::uint64_t next_u64() noexcept {
    return splitmix64(key_ ^ splitmix64(counter_++));
  }

  double uniform() noexcept { return to_unit_open(next_u64()); }

  // Box-Muller; one normal per two uniforms so the stream position is
  // independent of caching.
  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("below: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = stddev * normal();
    return m;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace pcq
