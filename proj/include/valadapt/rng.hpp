#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace valadapt {

// All randomized operations in this project draw from Rng below instead of the
// std <random> distributions, whose output sequences are implementation
// defined. Keeping the sampling code here makes every artifact reproducible
// from a u64 seed alone.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

inline void seed_absorb(std::uint64_t& h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffULL;
    h *= 0x100000001b3ULL;  // FNV-1a prime
  }
}

inline void seed_absorb(std::uint64_t& h, std::string_view s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  seed_absorb(h, static_cast<std::uint64_t>(s.size()));
}

inline void seed_absorb_all(std::uint64_t&) {}

template <typename T, typename... Rest>
void seed_absorb_all(std::uint64_t& h, const T& v, Rest&&... rest) {
  if constexpr (std::is_convertible_v<T, std::string_view>) {
    seed_absorb(h, std::string_view(v));
  } else {
    seed_absorb(h, static_cast<std::uint64_t>(v));
  }
  seed_absorb_all(h, rest...);
}

}  // namespace detail

// Derives an independent stream seed from a base seed and a tag such as
// ("gmm", i, j). Same inputs give the same seed on every platform.
template <typename... Parts>
std::uint64_t derive_seed(std::uint64_t base, Parts&&... parts) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a offset basis
  detail::seed_absorb(h, base);
  detail::seed_absorb_all(h, parts...);
  std::uint64_t s = h;
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive. Unbiased via rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    // returns value in [0, n)
    const std::uint64_t bound = n * ((~std::uint64_t{0}) / n);
    std::uint64_t x = next_u64();
    while (x >= bound) x = next_u64();
    return x % n;
  }

  // Standard normal via Box-Muller; the second value is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace valadapt
