#pragma once

#include <cstdint>
#include <limits>

namespace attnbias {

// Engine identifiers used to derive independent RNG streams.
enum class EngineId : std::uint64_t {
  positional_rpe = 1,
  positional_rope = 2,
  popularity = 3,
  latent = 4,
  retrain = 5,
  generative = 6,
};

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Independent sub-seed for a labelled part of a run.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix64(seed ^ mix64(tag + 0x632be59bd9b4e019ULL));
}

// Counter-based generator: the n-th output is a pure function of (key, n),
// so any replica's stream can be reproduced without replaying others.
// Satisfies UniformRandomBitGenerator.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t key = 0) : k1_(mix64(key)), k2_(mix64(key ^ 0x5851f42d4c957f2dULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix64(mix64(counter_++ ^ k1_) + k2_); }

  std::uint64_t counter() const { return counter_; }

  // Stream for replica `replica` of engine `engine` under a run seed.
  static CounterRng stream(std::uint64_t seed, EngineId engine, std::uint64_t replica) {
    std::uint64_t key = mix64(seed + 0x9e3779b97f4a7c15ULL);
    key = mix64(key ^ (static_cast<std::uint64_t>(engine) * 0xd1b54a32d192ed03ULL));
    key = mix64(key + replica * 0x9e3779b97f4a7c15ULL);
    return CounterRng(key);
  }

  // Sub-stream (e.g. one per instance inside a replica).
  CounterRng split(std::uint64_t index) const {
    return CounterRng(mix64(k1_ ^ mix64(k2_ + index * 0x9e3779b97f4a7c15ULL)));
  }

 private:
  std::uint64_t k1_;
  std::uint64_t k2_;
  std::uint64_t counter_ = 0;
};

}  // namespace attnbias
