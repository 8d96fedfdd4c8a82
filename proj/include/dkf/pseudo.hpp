#pragma once

#include <vector>

#include "dkf/model.hpp"
#include "dkf/numerics.hpp"

namespace dkf {

/// Derived quantities shared by all the distributed estimators.
///
/// G_n = H_n^T R_n^{-1} H_n is agent n's information matrix; G is the network
/// average (1/N) sum_n G_n. The split matrices satisfy, exactly up to
/// round-off,
///   H_tilde_n * G + H_check_n = G_n      and      A_tilde * G + A_check = G * A,
/// and reduce to H_tilde_n = G_n G^{-1}, A_tilde = G A G^{-1} with zero check
/// terms whenever G is invertible.
struct PseudoModel {
  std::vector<Matrix> G_local;       // G_n, one per agent
  Matrix G;                          // (1/N) sum G_n
  Matrix G_plus;                     // pseudoinverse of G
  std::vector<Matrix> H_tilde;       // G_n G^+
  std::vector<Matrix> H_check;       // G_n (I - G^+ G)
  Matrix A_tilde;                    // G A G^+
  Matrix A_check;                    // G A (I - G^+ G)
  std::vector<Matrix> obs_transform; // H_n^T R_n^{-1}, maps z^n to pseudo form
  bool g_invertible = false;

  Eigen::Index dim() const { return G.rows(); }
  int agent_count() const { return static_cast<int>(G_local.size()); }
};

/// H_n^T R_n^{-1} H_n. Throws on singular R_n.
Matrix local_information(const SensorSuite& suite, int n);

PseudoModel build_pseudo_model(const FieldModel& model, const SensorSuite& suite);

/// H_n^T R_n^{-1} z. The noise part of the result has covariance G_n.
Vector pseudo_observation(const SensorSuite& suite, int n, const Vector& z);

}  // namespace dkf
