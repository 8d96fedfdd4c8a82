#include "dkf/numerics.hpp"

#include <stdexcept>

namespace dkf {

namespace {

void require_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) {
    throw std::invalid_argument(std::string(op) + ": non-finite entries");
  }
}

void require_symmetric(const Matrix& m, const char* op) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument(std::string(op) + ": matrix not square");
  }
  const double scale = 1.0 + m.cwiseAbs().maxCoeff();
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) {
    throw std::invalid_argument(std::string(op) + ": matrix not symmetric");
  }
}

}  // namespace

bool is_finite(const Matrix& m) { return m.allFinite(); }

Matrix symmetrize(const Matrix& m) {
  require_finite(m, "symmetrize");
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("symmetrize: matrix not square");
  }
  return 0.5 * (m + m.transpose());
}

Matrix pseudo_inverse(const Matrix& m, double tol) {
  require_finite(m, "pseudo_inverse");
  if (m.size() == 0) return Matrix(m.cols(), m.rows());
  Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double cutoff = sv.size() > 0 ? tol * sv(0) : 0.0;
  Vector inv = Vector::Zero(sv.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > cutoff && sv(i) > 0.0) inv(i) = 1.0 / sv(i);
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

PsdProjection psd_project_logged(const Matrix& m) {
  require_finite(m, "psd_project");
  require_symmetric(m, "psd_project");
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("psd_project: eigendecomposition failed");
  }
  Vector vals = es.eigenvalues();
  double clipped = 0.0;
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    if (vals(i) < 0.0) {
      clipped = std::max(clipped, -vals(i));
      vals(i) = 0.0;
    }
  }
  Matrix out = es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
  return {0.5 * (out + out.transpose()), clipped};
}

Matrix psd_project(const Matrix& m) { return psd_project_logged(m).projected; }

SpdFactor spd_factor(const Matrix& m) {
  require_finite(m, "spd_factor");
  require_symmetric(m, "spd_factor");
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("spd_factor: eigendecomposition failed");
  }
  const Vector& vals = es.eigenvalues();
  const double scale = 1.0 + m.cwiseAbs().maxCoeff();
  if (vals.size() > 0 && vals(0) < -1e-10 * scale) {
    throw std::invalid_argument("spd_factor: matrix indefinite beyond tolerance");
  }
  const Eigen::Index n = m.rows();
  Matrix factor(n, n);
  // Descending eigenvalue order so rank deficiency shows up as trailing
  // zero columns.
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index src = n - 1 - j;
    const double lam = std::max(vals(src), 0.0);
    factor.col(j) = es.eigenvectors().col(src) * std::sqrt(lam);
  }
  return {m, factor};
}

SymEigs sym_eigs(const Matrix& m) {
  require_finite(m, "sym_eigs");
  require_symmetric(m, "sym_eigs");
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("sym_eigs: eigendecomposition failed");
  }
  return {es.eigenvalues(), es.eigenvectors()};
}

}  // namespace dkf
