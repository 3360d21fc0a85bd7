#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>

namespace metalm {

// Counter-mixed seeding: every consumer of randomness derives its own stream
// from (master seed, purpose, step, lane) so streams never interleave and a
// run is reproducible from the master seed alone.
uint64_t splitmix64(uint64_t x);
uint64_t mix_seed(uint64_t seed, uint64_t purpose, uint64_t a = 0, uint64_t b = 0);

// Deterministic generator with hand-rolled distributions. std distributions
// are implementation-defined, so sampling goes through these to keep results
// identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n); n must be positive. Rejection-free modulo of a
  // 64-bit draw is biased by < 2^-53 at our ranges; use scaled double instead.
  int64_t uniform_int(int64_t n);

  // Standard normal via Box-Muller; caches the second value of each pair.
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  // Full generator state (engine plus the cached normal spare) as hex text,
  // suitable for embedding in checkpoint manifests.
  std::string state_hex() const;
  void set_state_hex(const std::string& hex);  // data error on malformed input

  template <class It>
  void shuffle(It first, It last) {
    auto n = static_cast<int64_t>(last - first);
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace metalm
