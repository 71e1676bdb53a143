#pragma once

#include <cstdint>
#include <string_view>

namespace pcd {

// Deterministic RNG used everywhere in the project. Each consumer (init,
// augmentation, sampling, ...) derives its own stream from a master seed so
// results do not depend on call order.
//
// Core generator: splitmix64. Gaussian variates: Box-Muller on top of it.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(seed) {}

  // Stream derivation: mixes the label hash and up to three indices into the
  // base seed through extra splitmix rounds.
  static RngStream derive(uint64_t base, std::string_view label, uint64_t a = 0,
                          uint64_t b = 0, uint64_t c = 0);

  uint64_t next_u64();

  // Uniform in [0, 1), 24-bit resolution.
  float uniform();
  float uniform(float lo, float hi);

  // Integer in [0, n), n > 0.
  uint64_t uniform_index(uint64_t n);

  // Standard normal scaled by stddev (Box-Muller pair, one value cached).
  float gaussian(float stddev = 1.0f);

 private:
  uint64_t state_;
  bool has_cached_ = false;
  float cached_ = 0.0f;
};

// FNV-1a over arbitrary bytes; used for stream labels and parameter hashing.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace pcd
