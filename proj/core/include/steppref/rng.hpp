#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace steppref {

// 64-bit FNV-1a. Folds string labels into seed derivations.
constexpr uint64_t fnv1a(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// SplitMix64 finalizer; good avalanche, cheap, and stable across platforms.
constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Child seed for a named branch of a parent seed. Every stochastic sub-task
// (episode i, rollout n, branch "a"/"b", ...) re-derives its own stream from
// (parent, label[, index]), so results do not depend on scheduling order.
constexpr uint64_t derive_seed(uint64_t parent, std::string_view label) {
  return splitmix64(parent ^ splitmix64(fnv1a(label)));
}

constexpr uint64_t derive_seed(uint64_t parent, std::string_view label, uint64_t index) {
  return splitmix64(derive_seed(parent, label) ^ splitmix64(index + 0x51ed2701ull));
}

// Deterministic RNG. mt19937_64 output is fully specified by the standard;
// the uniform/gaussian mappings are done by hand because std::*_distribution
// is implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t bits() { return gen_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform index in [0, n). Bias is O(n / 2^53): negligible here.
  std::size_t uniform_index(std::size_t n) {
    std::size_t i = static_cast<std::size_t>(uniform01() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

  // Standard normal via Box-Muller (explicit, not std::normal_distribution).
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform01();  // (0, 1]: keeps log() finite
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace steppref
