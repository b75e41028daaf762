#pragma once

#include <cstdint>

namespace igpk {

// SplitMix64. Small, fully specified, identical output on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t next_below(std::uint64_t n) {
    // Rejection sampling keeps the distribution exact and the stream
    // platform-independent.
    const std::uint64_t limit = n * ((~0ULL) / n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Approximately standard normal via a 12-term Irwin-Hall sum. Chosen over
  // Box-Muller so initialization never touches libm and checkpoints are
  // bit-portable.
  double next_normal() {
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += next_uniform();
    return s - 6.0;
  }

 private:
  std::uint64_t state_;
};

// Stable derivation of stream seeds from a master seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
  Rng r(master ^ (tag * 0xD1B54A32D192ED03ULL));
  return r.next_u64();
}

}  // namespace igpk
