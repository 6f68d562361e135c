#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace weaktr {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Mixes a key and a counter into one well-scrambled 64-bit word.
inline std::uint64_t mix_key(std::uint64_t key, std::uint64_t counter) {
  return splitmix64(splitmix64(key ^ 0x6a09e667f3bcc909ull) + counter);
}

/// Hash of (seed, name, index) used to derive per-sample keys. Splits by
/// construction: distinct (name, index) pairs give independent streams.
inline std::uint64_t derive_key(std::uint64_t seed, const std::string& name, std::uint64_t index) {
  std::uint64_t h = splitmix64(seed);
  for (unsigned char c : name) {
    h = splitmix64(h ^ c);
  }
  return mix_key(h, index);
}

/// Counter-based PRNG: draw i is a pure function of (key, i), so streams are
/// reproducible regardless of call interleaving across samples.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return mix_key(key_, counter_++); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Normal truncated to [-2*sigma, 2*sigma], the usual transformer init.
  double trunc_normal(double sigma) {
    for (;;) {
      const double z = normal();
      if (std::fabs(z) <= 2.0) return z * sigma;
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace weaktr
