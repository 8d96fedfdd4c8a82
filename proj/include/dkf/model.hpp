#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "dkf/numerics.hpp"

namespace dkf {

/// Stream purposes. Every stream is keyed by (seed, trial, purpose) so a
/// trial's draws do not depend on how trials are scheduled across threads.
enum class Purpose : std::uint32_t {
  kInitialState = 1,
  kProcessNoise = 2,
  kObservationNoise = 3,
  kGraph = 100,
  kField = 101,
  kSensors = 102,
};

/// Deterministic pseudo-random stream. Identical (seed, trial, purpose)
/// always yields identical draws.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t trial, Purpose purpose);

  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double gaussian();
  Vector gaussian_vector(Eigen::Index n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

/// Linear-Gaussian field: x_{i+1} = A x_i + v_i with v ~ N(0, V) and
/// x_0 ~ N(x0_mean, x0_cov).
struct FieldModel {
  Matrix A;
  Matrix V;
  Vector x0_mean;
  Matrix x0_cov;

  Eigen::Index dim() const { return A.rows(); }

  /// Throws std::invalid_argument on inconsistent dimensions or if V or
  /// x0_cov fail symmetry/PSD checks.
  void validate() const;
};

/// Per-agent linear observations z^n = H_n x + r^n with r^n ~ N(0, R_n).
/// Every R_n must be strictly positive definite.
struct SensorSuite {
  std::vector<Matrix> H;
  std::vector<Matrix> R;

  int agent_count() const { return static_cast<int>(H.size()); }
  Eigen::Index obs_dim(int n) const { return H[static_cast<size_t>(n)].rows(); }

  void validate(Eigen::Index field_dim) const;
};

/// Ground truth over a horizon: states x_0..x_T and observations for every
/// agent at every time. observations[i][n] is agent n's measurement of x_i.
struct Trajectory {
  std::vector<Vector> states;
  std::vector<std::vector<Vector>> observations;

  int horizon() const { return static_cast<int>(states.size()) - 1; }
};

/// One field step: A x + v with v drawn from N(0, V).
Vector step_field(const FieldModel& model, const Vector& x, RngStream& rng);

/// One observation by agent n: H_n x + r with r drawn from N(0, R_n).
Vector observe(const SensorSuite& suite, int n, const Vector& x, RngStream& rng);

/// Full trajectory for one trial, deterministic in (seed, trial).
Trajectory simulate_truth(const FieldModel& model, const SensorSuite& suite,
                          int horizon, std::uint64_t seed, std::uint64_t trial);

}  // namespace dkf
