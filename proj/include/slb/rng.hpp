#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace slb {

// Deterministic random source. All draws are implemented on top of raw
// 64-bit outputs so that sequences do not depend on the standard library's
// distribution internals. Independent streams are derived from a master
// seed with a splitmix64 mix, which keeps per-layer / per-epoch randomness
// reproducible without threading a single generator through the codebase.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed == 0 ? 0x9e3779b97f4a7c15ull : seed) {}

  static std::uint64_t mix(std::uint64_t state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Independent stream keyed by (master, id).
  static Rng stream(std::uint64_t master, std::uint64_t id) {
    return Rng(mix(master ^ mix(id)));
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; second value cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Unbiased integer in [0, n).
  std::int64_t below(std::int64_t n) {
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<std::int64_t>(x % un);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(below(i + 1))]);
    }
  }

 private:
  std::mt19937_64 eng_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace slb
