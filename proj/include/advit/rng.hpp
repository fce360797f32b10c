#pragma once

#include <cstdint>
#include <random>

namespace advit {

// splitmix64 scramble; used to derive independent, reproducible RNG streams
// from one base seed (per epoch, per image, per attack restart, ...).
inline std::uint64_t mix_bits(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  return mix_bits(mix_bits(base ^ 0x5851f42d4c957f2dULL) + stream * 0x100000001b3ULL + index);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
  return std::mt19937_64(seed);
}

// Normal sample rejected outside clip_sigmas standard deviations.
inline double trunc_normal(std::mt19937_64& rng, double sigma,
                           double clip_sigmas = 2.0) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (;;) {
    double v = dist(rng);
    if (std::abs(v) <= clip_sigmas * sigma) return v;
  }
}

}  // namespace advit
