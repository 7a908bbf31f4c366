#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace unifed {

// SplitMix64 mix, used to derive independent stream seeds from (seed, tags).
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t seed_stream(std::uint64_t seed) { return splitmix64(seed); }

template <class... Tags>
std::uint64_t seed_stream(std::uint64_t seed, std::uint64_t tag, Tags... rest) {
  return seed_stream(splitmix64(seed ^ splitmix64(tag ^ 0x6a09e667f3bcc909ULL)), rest...);
}

// Deterministic generator: mt19937_64 (sequence pinned by the standard) with
// hand-rolled uniform/normal transforms, so draws do not depend on
// implementation-defined std::*_distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = eng_();
      if (r >= threshold) return r % n;
    }
  }

  int rademacher() { return uniform() < 0.5 ? -1 : 1; }

 private:
  std::mt19937_64 eng_;
};

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace unifed
