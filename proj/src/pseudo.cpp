#include "dkf/pseudo.hpp"

#include <stdexcept>

namespace dkf {

namespace {

Matrix r_inverse(const Matrix& r, int agent) {
  Eigen::LLT<Matrix> llt(symmetrize(r));
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("local_information: R singular for agent " +
                                std::to_string(agent));
  }
  return llt.solve(Matrix::Identity(r.rows(), r.cols()));
}

}  // namespace

Matrix local_information(const SensorSuite& suite, int n) {
  if (n < 0 || n >= suite.agent_count()) {
    throw std::invalid_argument("local_information: invalid agent index");
  }
  const auto un = static_cast<size_t>(n);
  const Matrix rinv = r_inverse(suite.R[un], n);
  return symmetrize(suite.H[un].transpose() * rinv * suite.H[un]);
}

PseudoModel build_pseudo_model(const FieldModel& model, const SensorSuite& suite) {
  suite.validate(model.dim());
  const Eigen::Index m = model.dim();
  const int agents = suite.agent_count();

  PseudoModel pm;
  pm.G_local.reserve(static_cast<size_t>(agents));
  pm.obs_transform.reserve(static_cast<size_t>(agents));
  pm.G = Matrix::Zero(m, m);
  for (int n = 0; n < agents; ++n) {
    const auto un = static_cast<size_t>(n);
    const Matrix rinv = r_inverse(suite.R[un], n);
    pm.obs_transform.push_back(suite.H[un].transpose() * rinv);
    pm.G_local.push_back(symmetrize(suite.H[un].transpose() * rinv * suite.H[un]));
    pm.G += pm.G_local.back();
  }
  pm.G = symmetrize(pm.G / static_cast<double>(agents));
  pm.G_plus = pseudo_inverse(pm.G);

  const Matrix residual_proj = Matrix::Identity(m, m) - pm.G_plus * pm.G;
  pm.H_tilde.reserve(static_cast<size_t>(agents));
  pm.H_check.reserve(static_cast<size_t>(agents));
  for (int n = 0; n < agents; ++n) {
    const auto un = static_cast<size_t>(n);
    pm.H_tilde.push_back(pm.G_local[un] * pm.G_plus);
    pm.H_check.push_back(pm.G_local[un] * residual_proj);
  }
  pm.A_tilde = pm.G * model.A * pm.G_plus;
  pm.A_check = pm.G * model.A * residual_proj;

  const auto eigs = sym_eigs(pm.G).values;
  pm.g_invertible = eigs(0) > kSvCutoff * std::max(eigs(eigs.size() - 1), 0.0) &&
                    eigs(0) > 0.0;
  return pm;
}

Vector pseudo_observation(const SensorSuite& suite, int n, const Vector& z) {
  if (n < 0 || n >= suite.agent_count()) {
    throw std::invalid_argument("pseudo_observation: invalid agent index");
  }
  const auto un = static_cast<size_t>(n);
  if (z.size() != suite.H[un].rows()) {
    throw std::invalid_argument("pseudo_observation: observation dimension mismatch");
  }
  Eigen::LLT<Matrix> llt(symmetrize(suite.R[un]));
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("pseudo_observation: R singular for agent " +
                                std::to_string(n));
  }
  return suite.H[un].transpose() * llt.solve(z);
}

}  // namespace dkf
