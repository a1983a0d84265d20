#include "dale/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dale/error.hpp"

namespace dale {

namespace {

void check_symmetric(const Tensor &a, double tol, std::size_t max_dim) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw Error(Errc::ShapeMismatch,
                "expected a square matrix, got " + shape_string(a.shape()));
  const std::size_t n = a.dim(0);
  if (n > max_dim)
    throw Error(Errc::BadDims, "matrix dimension " + std::to_string(n) +
                                   " exceeds " + std::to_string(max_dim));
  require_finite(a, "sym_eig input");
  const double scale = std::max(1.0, frobenius_norm(a));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(a.at(i, j) - a.at(j, i)) > tol * scale)
        throw Error(Errc::NonSymmetric,
                    "entry (" + std::to_string(i) + "," + std::to_string(j) +
                        ") differs from its transpose");
}

double off_diagonal_norm(const Tensor &a) {
  double s = 0.0;
  const std::size_t n = a.dim(0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j)
        s += a.at(i, j) * a.at(i, j);
  return std::sqrt(s);
}

} // namespace

EigenDecomposition sym_eig(const Tensor &input, const JacobiOptions &opts) {
  check_symmetric(input, opts.symmetry_tol, opts.max_dim);
  const std::size_t n = input.dim(0);

  // Work on the exactly symmetrized copy.
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      a.at(i, j) = 0.5 * (input.at(i, j) + input.at(j, i));
  Tensor v = Tensor::identity(n);

  const double threshold = opts.off_diagonal_tol * frobenius_norm(a);
  int sweep = 0;
  while (off_diagonal_norm(a) > threshold) {
    if (++sweep > opts.max_sweeps)
      throw Error(Errc::NonConvergent,
                  "Jacobi did not converge in " +
                      std::to_string(opts.max_sweeps) + " sweeps");
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0)
          continue;
        const double app = a.at(p, p), aqq = a.at(q, q);
        // Rotation angle chosen so the (p,q) entry vanishes; t is the
        // smaller root of t^2 + 2 theta t - 1 = 0.
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        a.at(p, q) = 0.0;
        a.at(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return a.at(x, x) < a.at(y, y);
  });

  EigenDecomposition out{std::vector<double>(n), Tensor({n, n})};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a.at(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k)
      out.vectors.at(k, j) = v.at(k, order[j]);
  }
  return out;
}

Tensor spectral_apply(const Tensor &a,
                      const std::function<double(double)> &f) {
  const auto eig = sym_eig(a);
  const std::size_t n = eig.values.size();
  std::vector<double> fl(n);
  for (std::size_t j = 0; j < n; ++j)
    fl[j] = f(eig.values[j]);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = i; k < n; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        s += eig.vectors.at(i, j) * fl[j] * eig.vectors.at(k, j);
      out.at(i, k) = s;
      out.at(k, i) = s;
    }
  return out;
}

Tensor sqrtm_spd(const Tensor &a) {
  return spectral_apply(a, [](double l) { return std::sqrt(std::max(l, 0.0)); });
}

Tensor inv_sqrtm_spd(const Tensor &a, double floor) {
  return spectral_apply(
      a, [floor](double l) { return 1.0 / std::sqrt(std::max(l, floor)); });
}

} // namespace dale
