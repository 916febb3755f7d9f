#pragma once

#include <array>
#include <cstdint>

namespace sizefit {

/// xoshiro256** generator seeded through splitmix64.
///
/// All derived distributions are implemented here rather than taken from
/// <random>, whose distribution algorithms are implementation-defined. The
/// stream for a given seed is therefore identical on every platform.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next();

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();
  double normal(double mean, double stddev);

  const State& state() const { return state_; }
  void set_state(const State& s) { state_ = s; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  State state_{};
};

/// splitmix64 step; also useful as a cheap integer hash.
std::uint64_t splitmix64(std::uint64_t& x);

/// Derive an independent seed from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace sizefit
