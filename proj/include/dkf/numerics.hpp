#pragma once

#include <Eigen/Dense>

namespace dkf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Default relative singular-value cutoff used by pseudo_inverse and by
/// rank decisions derived from it.
inline constexpr double kSvCutoff = 1e-12;

bool is_finite(const Matrix& m);

/// (m + m^T)/2. Throws std::invalid_argument on non-square or non-finite input.
Matrix symmetrize(const Matrix& m);

/// Moore-Penrose pseudoinverse. Singular values below tol * sigma_max are
/// treated as exactly zero, which keeps decompositions of singular
/// information matrices reproducible.
Matrix pseudo_inverse(const Matrix& m, double tol = kSvCutoff);

/// Nearest PSD matrix in the eigenvalue sense: negative eigenvalues are
/// clipped to zero. Input must be symmetric. Idempotent.
Matrix psd_project(const Matrix& m);

/// Result of psd_project with the size of the largest clipped eigenvalue,
/// for callers that track how much round-off they are absorbing.
struct PsdProjection {
  Matrix projected;
  double clipped;  // magnitude of the most negative eigenvalue seen, >= 0
};
PsdProjection psd_project_logged(const Matrix& m);

/// factor * factor^T == source. For singular PSD input the factor is
/// rank-revealing: columns are ordered by decreasing eigenvalue, null
/// directions give zero columns.
struct SpdFactor {
  Matrix source;
  Matrix factor;
};

/// Throws std::invalid_argument if m is indefinite beyond a 1e-10 tolerance.
SpdFactor spd_factor(const Matrix& m);

/// Eigenvalues ascending, eigenvectors orthonormal in matching column order.
struct SymEigs {
  Vector values;
  Matrix vectors;
};
SymEigs sym_eigs(const Matrix& m);

}  // namespace dkf
