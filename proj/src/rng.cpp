#include "ikdmil/rng.hpp"

#include <cmath>

namespace ikdmil {

Pcg32::Pcg32(uint64_t seed, uint64_t stream) {
  inc_ = (stream << 1u) | 1u;
  state_ = 0u;
  next_u32();
  state_ += seed;
  next_u32();
}

uint32_t Pcg32::next_u32() {
  uint64_t old = state_;
  state_ = old * 6364136223846793005ULL + inc_;
  uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
  uint32_t rot = static_cast<uint32_t>(old >> 59u);
  return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
}

double Pcg32::uniform() {
  uint64_t hi = next_u32();
  uint64_t lo = next_u32();
  uint64_t bits = ((hi << 32) | lo) >> 11;  // 53 bits
  return static_cast<double>(bits) * 0x1.0p-53;
}

double Pcg32::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t Pcg32::uniform_int(int64_t lo, int64_t hi) {
  uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
  if (range == 0) return lo + static_cast<int64_t>(next_u32());  // full 32-bit span
  // Lemire-style rejection on 32-bit words, widened for ranges > 2^32.
  if (range <= 0xffffffffULL) {
    uint32_t r32 = static_cast<uint32_t>(range);
    uint32_t threshold = (-r32) % r32;
    for (;;) {
      uint32_t x = next_u32();
      if (x >= threshold) return lo + static_cast<int64_t>(x % r32);
    }
  }
  uint64_t threshold = (-range) % range;
  for (;;) {
    uint64_t x = (static_cast<uint64_t>(next_u32()) << 32) | next_u32();
    if (x >= threshold) return lo + static_cast<int64_t>(x % range);
  }
}

double Pcg32::gaussian() {
  // u1 in (0,1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Pcg32::gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t base, std::string_view purpose, uint64_t index) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the purpose tag
  for (char c : purpose) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(base ^ h) + index);
}

}  // namespace ikdmil
