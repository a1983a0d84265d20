#pragma once

#include <cstdint>
#include <initializer_list>

namespace dale {

/// SplitMix64 generator (Steele, Lea & Flood 2014).
///
/// The state advances by the golden-ratio increment 0x9e3779b97f4a7c15 and
/// each output is the state passed through the finalizer
///
///   z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
///   z = (z ^ (z >> 27)) * 0x94d049bb133111eb
///   z =  z ^ (z >> 31)
///
/// Doubles in [0,1) take the top 53 bits of an output. Everything is integer
/// arithmetic, so a seed produces the same stream on every platform.
///
/// split(tag) derives an independent child stream from the current state and
/// a tag without advancing the parent. Every stochastic call site is handed
/// its own child so the order in which modules run cannot change results.
class Rng {
public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept;

  /// Uniform double in [0, 1).
  double uniform01() noexcept;

  /// Uniform double in [lo, hi). Throws Errc::BadRange unless lo < hi.
  double uniform(double lo, double hi);

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller (consumes two uniforms).
  double normal() noexcept;

  Rng split(std::uint64_t tag) const noexcept;
  Rng split(std::initializer_list<std::uint64_t> tags) const noexcept;

  std::uint64_t state() const noexcept { return state_; }

private:
  std::uint64_t state_;
};

std::uint64_t mix64(std::uint64_t z) noexcept;

} // namespace dale
