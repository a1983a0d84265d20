#include "dale/rng.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "dale/error.hpp"

namespace dale {

namespace {
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
}

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() noexcept {
  state_ += kGolden;
  return mix64(state_);
}

double Rng::uniform01() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  if (!(lo < hi))
    throw Error(Errc::BadRange, "uniform(" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + ")");
  return lo + (hi - lo) * uniform01();
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0)
    throw Error(Errc::BadRange, "below(0)");
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() noexcept {
  const double u1 = 1.0 - uniform01(); // (0, 1]
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::split(std::uint64_t tag) const noexcept {
  return Rng(mix64(state_ ^ mix64(tag + kGolden)));
}

Rng Rng::split(std::initializer_list<std::uint64_t> tags) const noexcept {
  Rng r = *this;
  for (auto t : tags)
    r = r.split(t);
  return r;
}

} // namespace dale
