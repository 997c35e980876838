#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace p3d {

namespace detail {

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(const char* s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  while (*s) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(*s++));
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

// Counter-based generator. The full state is two u64 words, so it can be
// checkpointed exactly. split() derives an independent stream from a tag
// without advancing this one.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  RngState() = default;
  explicit RngState(std::uint64_t s) : seed(s) {}

  std::uint64_t next_u64() {
    ++counter;
    return detail::mix64(seed + counter * 0x9E3779B97F4A7C15ull);
  }

  RngState split(std::uint64_t tag) const {
    RngState child;
    child.seed = detail::mix64(seed ^ detail::mix64(tag + 0x632BE59BD9B4E019ull));
    return child;
  }

  RngState split(const char* tag) const { return split(detail::fnv1a(tag)); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
    const std::uint64_t limit = ~std::uint64_t(0) - ~std::uint64_t(0) % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Box-Muller, no cached spare so the state stays two words
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }
};

}  // namespace p3d
