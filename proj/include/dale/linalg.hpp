#pragma once

#include <functional>
#include <vector>

#include "dale/tensor.hpp"

namespace dale {

struct EigenDecomposition {
  std::vector<double> values; // ascending
  Tensor vectors;             // column j is the eigenvector of values[j]
};

struct JacobiOptions {
  double symmetry_tol = 1e-9;
  double off_diagonal_tol = 1e-12; // relative to ||A||_F
  int max_sweeps = 100;
  std::size_t max_dim = 64;
};

/// Cyclic Jacobi eigensolver for small symmetric matrices.
///
/// Throws Errc::NonSymmetric when |A - A^T| exceeds the tolerance and
/// Errc::NonConvergent when the sweep cap is hit.
EigenDecomposition sym_eig(const Tensor &a, const JacobiOptions &opts = {});

/// V f(L) V^T for symmetric A; f is applied to each eigenvalue.
Tensor spectral_apply(const Tensor &a, const std::function<double(double)> &f);

/// Principal square root of a symmetric PSD matrix. Eigenvalues down to
/// -1e-10 are clamped to zero; anything more negative is still clamped, the
/// caller owns positive-semidefiniteness.
Tensor sqrtm_spd(const Tensor &a);

/// A^{-1/2} with eigenvalues floored at `floor`.
Tensor inv_sqrtm_spd(const Tensor &a, double floor = 1e-12);

} // namespace dale
