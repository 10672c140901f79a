#pragma once

#include <cmath>
#include <cstdint>

namespace surfseg {

// SplitMix64: tiny seeded generator, bit-exact on every platform.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]; never zero, safe under log().
  double next_double_open() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (one value per call, no caching).
  double next_normal() {
    const double u1 = next_double_open();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from a master seed and up to three
// salts (label, split, index, ...). Pure function of its arguments.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  SplitMix64 mix(master);
  std::uint64_t s = mix.next_u64();
  s = SplitMix64(s ^ (a + 0x9e3779b97f4a7c15ull)).next_u64();
  s = SplitMix64(s ^ (b + 0xbf58476d1ce4e5b9ull)).next_u64();
  s = SplitMix64(s ^ (c + 0x94d049bb133111ebull)).next_u64();
  return s;
}

}  // namespace surfseg
