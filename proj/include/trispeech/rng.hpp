#ifndef TRISPEECH_RNG_HPP
#define TRISPEECH_RNG_HPP

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>

namespace trispeech {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_str(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

// Deterministic, portable PRNG (xoshiro256**). Every stochastic consumer
// derives its own stream from (seed, tag, indices), so adding or removing an
// unrelated consumer never shifts anyone else's draws.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& si : s_) {
      x = splitmix64(x);
      si = x;
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0,1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, one value per call (the twin draw is discarded so streams stay
  // easy to reason about).
  double normal(double mean = 0.0, double sigma = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + sigma * z;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
};

// Derives an independent stream from a root seed, a purpose tag, and indices.
inline Rng derive_rng(uint64_t seed, const std::string& tag,
                      std::initializer_list<uint64_t> indices = {}) {
  uint64_t h = splitmix64(seed ^ hash_str(tag));
  for (uint64_t i : indices) h = splitmix64(h ^ (i + 0x9e3779b97f4a7c15ULL));
  return Rng(h);
}

}  // namespace trispeech

#endif  // TRISPEECH_RNG_HPP
