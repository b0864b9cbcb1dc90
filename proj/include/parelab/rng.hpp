#pragma once

#include <cmath>
#include <cstdint>

namespace parelab {

// Counter-based PRNG built on the splitmix64 finalizer.
//
// Every random quantity in the project is a pure function of
// (seed, stream ids..., counter), so datasets, weight inits and training
// batches are reproducible without carrying generator state around.
// Integer output is platform-exact; the floating-point transforms below
// use libm (log/cos/sqrt) and are exact per-platform only.

inline uint64_t splitmix64_mix(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

constexpr uint64_t kGolden64 = 0x9E3779B97F4A7C15ULL;

// splitmix64 output for a keyed counter. key=seed, counter=0,1,2,...
// reproduces the classic sequential splitmix64 stream for that seed.
inline uint64_t rng_bits(uint64_t key, uint64_t counter) {
  return splitmix64_mix(key + kGolden64 * (counter + 1));
}

// Stream ids keep independent uses of the same seed decorrelated.
enum class RngUse : uint64_t {
  toy_model = 1,
  pose = 2,
  shape = 3,
  camera = 4,
  background = 5,
  shade_jitter = 6,
  synth_occ = 7,
  rand_crop = 8,
  weight_init = 9,
  batch = 10,
  test = 11,
};

inline uint64_t derive_key(uint64_t seed, uint64_t a = 0, uint64_t b = 0,
                           uint64_t c = 0) {
  uint64_t k = splitmix64_mix(seed + kGolden64);
  k = splitmix64_mix(k ^ (a * 0xD1342543DE82EF95ULL + 1));
  k = splitmix64_mix(k ^ (b * 0xDABA0B6EB09322E3ULL + 1));
  k = splitmix64_mix(k ^ (c * 0x2545F4914F6CDD1DULL + 1));
  return k;
}

// A keyed stream with an internal counter. Copyable; advancing one copy
// does not affect another.
class Rng {
public:
  explicit Rng(uint64_t key) : key_(key) {}
  Rng(uint64_t seed, RngUse use, uint64_t index = 0)
      : key_(derive_key(seed, static_cast<uint64_t>(use), index)) {}

  uint64_t bits() { return rng_bits(key_, counter_++); }

  // uniform in [0,1)
  double uniform() { return double(bits() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return n ? bits() % n : 0; }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, fixed two-draw form
  double normal() {
    double u1 = double((bits() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace parelab
