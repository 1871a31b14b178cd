#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wmgym {

inline constexpr std::string_view kVersion = "0.1.0";

// Configuration problems (bad goal references, shape mismatches, unknown
// config keys). Message carries the offending key path where applicable.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values encountered mid-computation; message names the tensor.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Procedural generation gave up (e.g. no free space for a distractor).
struct AugmentationError : std::runtime_error {
  explicit AugmentationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG with counter-based splitting.
//
// Every stream is identified by an immutable 64-bit key; `fork` derives a
// child key by hashing (key, label) so parallel consumers never share state.
// The generator itself is splitmix64.
// ---------------------------------------------------------------------------

uint64_t hash_mix(uint64_t a, uint64_t b);
uint64_t fnv1a(std::string_view s);

class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(seed), state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n). n must be > 0.
  uint64_t uniform_int(uint64_t n);

  // Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();

  // Fills span with standard normals, pairwise (even count consumes exactly
  // count uniforms; odd count wastes the sine partner of the last pair).
  void fill_normal(std::span<double> out);

  // Child stream independent of this stream's consumption position.
  Rng fork(uint64_t index) const { return Rng(hash_mix(key_, index)); }
  Rng fork(std::string_view label) const { return Rng(hash_mix(key_, fnv1a(label))); }
  Rng fork(std::string_view label, uint64_t index) const {
    return Rng(hash_mix(hash_mix(key_, fnv1a(label)), index));
  }

  uint64_t key() const { return key_; }

 private:
  uint64_t key_;
  uint64_t state_;
};

// ---------------------------------------------------------------------------
// parallel_for: runs fn(i) for i in [0, n). Results must be written to
// per-index slots by the caller; chunks are assigned statically so the
// work partition does not depend on scheduling.
// ---------------------------------------------------------------------------
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

int hardware_workers();

}  // namespace wmgym
