#include "pcd/rng.hpp"

#include <cmath>

namespace pcd {

namespace {

inline uint64_t splitmix64(uint64_t& s) {
  s += 0x9e3779b97f4a7c15ull;
  uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

RngStream RngStream::derive(uint64_t base, std::string_view label, uint64_t a,
                            uint64_t b, uint64_t c) {
  uint64_t s = base;
  uint64_t mixed = splitmix64(s) ^ fnv1a64(label.data(), label.size());
  mixed ^= 0x9e3779b97f4a7c15ull + a;
  (void)splitmix64(mixed);
  mixed ^= 0xc2b2ae3d27d4eb4full + b;
  (void)splitmix64(mixed);
  mixed ^= 0x165667b19e3779f9ull + c;
  uint64_t seed = splitmix64(mixed);
  return RngStream(seed);
}

uint64_t RngStream::next_u64() { return splitmix64(state_); }

float RngStream::uniform() {
  return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
}

float RngStream::uniform(float lo, float hi) {
  return lo + (hi - lo) * uniform();
}

uint64_t RngStream::uniform_index(uint64_t n) {
  // Desk-scale n: modulo bias is negligible (n << 2^64) but reject anyway.
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

float RngStream::gaussian(float stddev) {
  if (has_cached_) {
    has_cached_ = false;
    return cached_ * stddev;
  }
  // u1 in (0,1] so the log is finite.
  double u1 = 1.0 - static_cast<double>(uniform());
  double u2 = static_cast<double>(uniform());
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_ = static_cast<float>(r * std::sin(theta));
  has_cached_ = true;
  return static_cast<float>(r * std::cos(theta)) * stddev;
}

}  // namespace pcd
