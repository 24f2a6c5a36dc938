#pragma once

#include <cstdint>
#include <string_view>

namespace mage {

// 64-bit FNV-1a. Used for dataset hashes, parameter-group hashes and seed
// derivation; fixed here so independent implementations agree byte for byte.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// SplitMix64 output function.
inline uint64_t splitmix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Counter-based SplitMix64 stream: draw i equals splitmix64(seed + i*gamma),
// so the full generator state is just (seed, counter) and can be serialized
// exactly into a checkpoint and restored for bit-identical resumes.
class CounterRng {
 public:
  CounterRng() = default;
  explicit CounterRng(uint64_t seed, uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  uint64_t next_u64() { return splitmix64(seed_ + 0x9E3779B97F4A7C15ull * counter_++); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

// Named sub-stream so the init stream, shuffle stream etc. never collide.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
  return splitmix64(seed ^ fnv1a64(tag));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index) {
  return splitmix64(derive_seed(seed, tag) ^ (0x9E3779B97F4A7C15ull * (index + 1)));
}

}  // namespace mage
