#pragma once

#include <cstdint>
#include <random>

namespace tubefield {

// All randomized code in this project draws from this wrapper instead of the
// <random> distributions, whose output is implementation-defined. mt19937_64
// itself is fully specified, so every sequence here is reproducible across
// compilers and platforms.
class Rng {
public:
  explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform integer in [0, n), n > 0
  uint64_t uniform_u64(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // uniform double in [0, 1) with 53 random bits
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Independent child stream; depends only on the construction seed and the
  // stream id, never on how much this generator has been consumed.
  Rng fork(uint64_t stream) const {
    uint64_t s = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
    s = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9ULL;
    s = (s ^ (s >> 27)) * 0x94D049BB133111EBULL;
    return Rng(s ^ (s >> 31));
  }

  uint64_t seed() const { return seed_; }

private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

} // namespace tubefield
