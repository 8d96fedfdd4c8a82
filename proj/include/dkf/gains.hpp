#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dkf/model.hpp"
#include "dkf/network.hpp"
#include "dkf/numerics.hpp"
#include "dkf/pseudo.hpp"

namespace dkf {

enum class GainMode { kOptimal, kStatic };

struct GainConfig {
  GainMode mode = GainMode::kOptimal;
  double alpha = 0.1;   // static innovation weight
  double beta = -1.0;   // consensus weight; negative selects 1/lambda_max(L)
  double kappa = 0.1;   // static state-gain scalar
  int horizon = 0;
  double ceiling_factor = 1e6;  // covariance ceiling, times trace(Sigma0 + V)
};

/// Second moment of the stacked network error vector
///   [e_y^1; ...; e_y^N; e_x^1; ...; e_x^N]
/// where e_y^n is agent n's pseudo-state prediction error and e_x^n its
/// field prediction error. Kept symmetric PSD by projection after every
/// update.
struct JointCovariance {
  int time_index = 0;
  int agents = 0;
  Eigen::Index field_dim = 0;
  Matrix P;  // 2*agents*field_dim square

  Eigen::Index y_offset(int n) const { return n * field_dim; }
  Eigen::Index x_offset(int n) const { return (agents + n) * field_dim; }

  Eigen::Block<const Matrix> yy(int n, int m) const {
    return P.block(y_offset(n), y_offset(m), field_dim, field_dim);
  }
  Eigen::Block<const Matrix> yx(int n, int m) const {
    return P.block(y_offset(n), x_offset(m), field_dim, field_dim);
  }
  Eigen::Block<const Matrix> xx(int n, int m) const {
    return P.block(x_offset(n), x_offset(m), field_dim, field_dim);
  }

  double y_trace(int n) const { return yy(n, n).trace(); }
  double x_trace(int n) const { return xx(n, n).trace(); }
  double total_x_trace() const;
};

/// Per-agent gains for one round. B_neighbor is aligned with
/// SensorNetwork::neighbors(n), i.e. ascending neighbor index.
struct AgentGains {
  std::vector<Matrix> B_neighbor;
  Matrix B_self;
  Matrix K;
};

/// Precomputed gain trajectory plus the predicted filtered error covariance
/// traces the recursion produces along the way.
struct GainSchedule {
  int agents = 0;
  Eigen::Index field_dim = 0;
  int horizon = 0;
  GainMode mode = GainMode::kOptimal;
  std::uint64_t model_hash = 0;
  std::vector<std::vector<AgentGains>> steps;      // [time][agent]
  std::vector<std::vector<double>> predicted_mse;  // [time][agent], filtered
  double max_psd_clip = 0.0;
  std::vector<std::string> warnings;

  const AgentGains& at(int time, int agent) const;

  void save(const std::string& path) const;
  static GainSchedule load(const std::string& path);
};

/// Joint covariance at time 0 under the common initialization
/// x_hat = x0_mean, y_hat = G * x0_mean for every agent.
JointCovariance init_joint_covariance(const FieldModel& model,
                                      const PseudoModel& pseudo, int agents);

/// Consensus + innovation stage: propagates the covariance through the
/// pseudo-state update. Uses only each agent's B gains.
JointCovariance y_stage_covariance(const JointCovariance& P,
                                   const std::vector<AgentGains>& gains,
                                   const PseudoModel& pseudo,
                                   const SensorNetwork& net);

/// Field update stage: propagates through x_hat += K (y_filt - G x_hat).
/// Expects the post-y-stage covariance. Uses only each agent's K.
JointCovariance x_stage_covariance(const JointCovariance& P,
                                   const std::vector<AgentGains>& gains,
                                   const PseudoModel& pseudo);

/// Full filter step: y stage followed by x stage.
JointCovariance filter_step_covariance(const JointCovariance& P,
                                       const std::vector<AgentGains>& gains,
                                       const PseudoModel& pseudo,
                                       const SensorNetwork& net);

/// Prediction stage of the joint recursion. Process noise is the same
/// field noise for every agent, which fixes the cross-agent noise blocks.
JointCovariance predict_step_covariance(const JointCovariance& P,
                                        const FieldModel& model,
                                        const PseudoModel& pseudo);

struct ConsensusGain {
  std::vector<Matrix> neighbor;  // aligned with net.neighbors(n)
  Matrix self;
};

/// Minimum-variance B gains for agent n given the prediction-form joint
/// covariance: cross-covariance times pseudoinverse of the stacked residual
/// covariance.
ConsensusGain gauss_markov_B(const JointCovariance& P, int n,
                             const PseudoModel& pseudo,
                             const SensorNetwork& net);

/// Minimum-variance K for agent n given the post-y-stage joint covariance.
Matrix gauss_markov_K(const JointCovariance& P, int n, const PseudoModel& pseudo);

/// Runs the joint covariance recursion over config.horizon rounds and
/// records the gains it selects (or the static gains it is given) plus the
/// predicted per-agent filtered MSE trace at every round.
///
/// Throws std::runtime_error on a disconnected network or when the
/// covariance trace passes the configured ceiling.
GainSchedule precompute_schedule(const FieldModel& model, const SensorSuite& suite,
                                 const SensorNetwork& net, const PseudoModel& pseudo,
                                 const GainConfig& config);

/// State-gain schedule for the consensus-on-measurements and
/// consensus-on-innovations estimators. beta is the (static) consensus
/// weight; K comes from the same covariance machinery applied to each
/// estimator's own error system.
struct ConsensusGainSchedule {
  int agents = 0;
  Eigen::Index field_dim = 0;
  int horizon = 0;
  GainMode mode = GainMode::kOptimal;
  double beta = 0.0;
  std::vector<std::vector<Matrix>> K;              // [time][agent]
  std::vector<std::vector<double>> predicted_mse;  // [time][agent], filtered
  std::vector<std::string> warnings;
};

ConsensusGainSchedule precompute_dikf_gains(const FieldModel& model,
                                            const SensorSuite& suite,
                                            const SensorNetwork& net,
                                            const PseudoModel& pseudo,
                                            const GainConfig& config);

ConsensusGainSchedule precompute_pikf_gains(const FieldModel& model,
                                            const SensorSuite& suite,
                                            const SensorNetwork& net,
                                            const PseudoModel& pseudo,
                                            const GainConfig& config);

/// Resolves a configured beta: negative means 1/lambda_max(L), with 0 for a
/// single-node network.
double resolve_beta(const GainConfig& config, const SensorNetwork& net);

}  // namespace dkf
