// prng.hpp — seeded random streams with portable, checkpointable state.
//
// std::* distributions are implementation-defined, so every draw here is
// hand-rolled on top of mt19937_64: identical seeds give identical sequences
// on any platform, and a stream can be written to / restored from a string.
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace regseg {

/// SplitMix64 step; used to spread user seeds and derive child streams.
std::uint64_t splitmix64(std::uint64_t& state);

/// FNV-1a over a string, for naming derived streams.
std::uint64_t hash_tag(const std::string& tag);

class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed);

  /// Independent child stream; deterministic in (parent seed, tag).
  Rng child(const std::string& tag) const;

  std::uint64_t next_u64();
  /// Uniform in [0,1) with 53-bit resolution.
  double uniform();
  /// Uniform in [lo,hi).
  double uniform(double lo, double hi);
  /// Uniform integer in [0,n); rejection-sampled, no modulo bias.
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller (second value cached).
  double normal();
  double normal(double mean, double stddev);
  /// Fisher-Yates sample of k distinct values from [0,n); k <= n.
  std::vector<int> sample_without_replacement(int n, int k);
  /// In-place shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[uniform_int(i)]);
  }

  std::uint64_t seed() const { return seed_; }
  /// Serialized engine + cache state; restore() round-trips exactly.
  std::string state() const;
  void restore(const std::string& s);

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace regseg
