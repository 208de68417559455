#pragma once

#include <cstdint>
#include <string_view>

namespace mclfir {

/// splitmix64 step; also the basis for seed derivation.
uint64_t splitmix64(uint64_t& state);

/// Stable 64-bit FNV-1a over bytes. Used for text hashing so word
/// embeddings are identical across runs and platforms.
uint64_t fnv1a64(std::string_view bytes);

/// Mix two 64-bit values into a new seed.
uint64_t mix_seed(uint64_t a, uint64_t b);

/// Deterministic RNG with self-contained uniform/normal helpers so streams
/// do not depend on standard-library distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next();
  /// Uniform in [0,1).
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0,n). n must be positive.
  int64_t below(int64_t n);
  /// Standard normal via Box-Muller (two draws per call, no caching).
  double normal();
  /// Independent derived stream; consumes one draw from this stream.
  Rng fork(uint64_t tag);

 private:
  uint64_t s_[4];
};

}  // namespace mclfir
