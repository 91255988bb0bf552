#pragma once

#include <cmath>
#include <cstdint>

namespace stark {

// Deterministic, splittable PRNG (splitmix64 core). All randomness in the
// project flows through instances of this class; there is no global state
// and no dependence on libstdc++ distribution internals, so identical seeds
// give identical streams on any build of the same platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed ^ 0x5851F42D4C957F2DULL)) {}

  std::uint64_t u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  std::uint32_t u32() { return static_cast<std::uint32_t>(u64() >> 32); }

  // [0,1), 53-bit resolution
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0,n)
  int uniform_int(int n) {
    return static_cast<int>((static_cast<unsigned __int128>(u64()) * static_cast<unsigned __int128>(n)) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller, no caching so the draw count stays predictable
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Child generator independent of this one for distinct stream ids.
  // Does not advance the parent.
  Rng split(std::uint64_t stream) const {
    Rng child(0);
    child.state_ = mix(state_ ^ mix(stream + 0x632BE59BD9B4E019ULL));
    return child;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

}  // namespace stark
