#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "dale/error.hpp"
#include "dale/rng.hpp"
#include "dale/tensor.hpp"

namespace testing_support {

/// Code of the dale::Error thrown by f, or nullopt if nothing was thrown.
template <typename F> std::optional<dale::Errc> error_code(F &&f) {
  try {
    f();
  } catch (const dale::Error &e) {
    return e.code();
  }
  return std::nullopt;
}

inline dale::Tensor random_tensor(dale::Shape shape, dale::Rng &rng,
                                  double lo = -1.0, double hi = 1.0) {
  dale::Tensor t(std::move(shape));
  for (auto &v : t.data())
    v = rng.uniform(lo, hi);
  return t;
}

/// B^T B + shift I.
inline dale::Tensor random_spd(std::size_t d, dale::Rng &rng, double shift = 1e-6) {
  const auto b = random_tensor({d, d}, rng);
  auto a = dale::matmul(dale::transpose(b), b);
  for (std::size_t i = 0; i < d; ++i)
    a.at(i, i) += shift;
  return a;
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double rel_err(const std::vector<double> &a, const std::vector<double> &b,
                      double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Central differences of f at x.
inline std::vector<double> numeric_grad(const std::function<double(std::vector<double> &)> &f,
                                        std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

} // namespace testing_support
