#pragma once

#include <cstdint>
#include <string_view>

namespace ikdmil {

// PCG32 (Melissa O'Neill's pcg32-oneseq). Chosen over std engines because its
// output sequence is pinned by the algorithm, not the standard library, so
// datasets and initializations stay byte-identical across toolchains.
class Pcg32 {
 public:
  explicit Pcg32(uint64_t seed, uint64_t stream = 0xda3e39cb94b95bdbULL);

  uint32_t next_u32();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [lo, hi] inclusive (unbiased).
  int64_t uniform_int(int64_t lo, int64_t hi);
  // Standard normal via Box-Muller (no cached spare, draw order is fixed).
  double gaussian();
  double gaussian(double mean, double stddev);

 private:
  uint64_t state_;
  uint64_t inc_;
};

// splitmix64 step; used to derive independent stream seeds.
uint64_t splitmix64(uint64_t x);

// Stable seed derivation for named substreams: mixes a base seed, a purpose
// tag, and an index. Same inputs give the same stream on every platform.
uint64_t derive_seed(uint64_t base, std::string_view purpose, uint64_t index = 0);

}  // namespace ikdmil
