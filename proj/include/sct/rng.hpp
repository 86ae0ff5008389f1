#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace sct {

// Child-seed purposes. Every random stream in a run is derived from one root
// seed through `derive_seed`, so each component can be replayed in isolation.
enum class SeedPurpose : std::uint64_t {
  kData = 1,
  kInit = 2,
  kAugment = 3,
  kStochasticDepth = 4,
  kShuffle = 5,
};

// splitmix64 finalizer applied to root + purpose * golden-ratio increment.
std::uint64_t derive_seed(std::uint64_t root, SeedPurpose purpose);

// mt19937_64 with platform-independent conversions to uniform/normal/integers
// (the std distributions are implementation-defined, which would break
// bit-stable dataset files across standard libraries).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller (one output per call).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  // Uniform in [0, n).
  std::size_t index(std::size_t n);
  // Uniform in [lo, hi] inclusive.
  std::int64_t integer(std::int64_t lo, std::int64_t hi);

 private:
  std::mt19937_64 engine_;
};

}  // namespace sct
