#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace d2o {

// Counter-based generator: output k of a stream is the splitmix64 finalizer
// applied to seed + (k+1)*phi. Identical (seed, counter) always reproduces
// the same draw, and independent streams can be forked without sharing state.
struct RngState {
  uint64_t seed = 0;
  uint64_t counter = 0;

  explicit RngState(uint64_t s = 0, uint64_t c = 0) : seed(s), counter(c) {}

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t next_u64() {
    ++counter;
    return mix(seed + counter * 0x9e3779b97f4a7c15ull);
  }

  // Uniform in (0,1): 53 mantissa bits, offset half a ulp away from 0.
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  // Box-Muller; consumes two uniforms per pair.
  void next_normal2(double& a, double& b) {
    double u1 = next_uniform();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    a = r * std::cos(2.0 * M_PI * u2);
    b = r * std::sin(2.0 * M_PI * u2);
  }

  double next_normal() {
    double a, b;
    next_normal2(a, b);
    return a;
  }

  int64_t next_below(int64_t n) {  // uniform in [0, n)
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  double next_range(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  // Independent child stream; stable under draws made on the parent.
  RngState fork(uint64_t key) const { return RngState(mix(seed ^ mix(key + 0x632be59bd9b4e019ull))); }
};

template <typename S>
void fill_normal(RngState& rng, S* out, int64_t n) {
  int64_t i = 0;
  for (; i + 1 < n; i += 2) {
    double a, b;
    rng.next_normal2(a, b);
    out[i] = static_cast<S>(a);
    out[i + 1] = static_cast<S>(b);
  }
  if (i < n) out[i] = static_cast<S>(rng.next_normal());
}

}  // namespace d2o
