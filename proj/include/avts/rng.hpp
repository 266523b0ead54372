#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace avts {

// Deterministic RNG. The mt19937_64 engine is pinned by the standard; the
// distributions are hand-rolled so streams are reproducible across library
// implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed), seed_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // [0, n)
  int uniform_int(int n) {
    // modulo-free rejection
    const uint64_t span = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<int>(x % span);
  }

  // Box-Muller, no cached spare (keeps the stream position obvious).
  double normal() {
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent child stream derived from the original seed, not the current
  // state, so forks do not depend on how much of the parent was consumed.
  Rng fork(uint64_t stream) const { return Rng(mix(seed_, stream)); }

  static uint64_t mix(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the combined words
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_;
};

}  // namespace avts
