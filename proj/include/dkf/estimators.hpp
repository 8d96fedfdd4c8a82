#pragma once

#include <vector>

#include "dkf/gains.hpp"
#include "dkf/model.hpp"
#include "dkf/network.hpp"
#include "dkf/numerics.hpp"
#include "dkf/pseudo.hpp"

namespace dkf {

/// Per-agent filter state. The same struct serves all three distributed
/// estimators; the consensus-on-measurements and consensus-on-innovations
/// variants keep their consensus value in y_filt and the previous local
/// signal in aux_prev.
struct AgentState {
  int id = 0;
  Vector x_pred;
  Vector x_filt;
  Vector y_pred;
  Vector y_filt;
  Vector aux_prev;
};

/// Broadcasts in flight for one round. payload[l] is what agent l sent at
/// the end of the previous round; agent n reads only the entries at its
/// neighbor indices, so no value computed in the current round is ever
/// visible to another agent.
struct RoundMailbox {
  int round_index = 0;
  std::vector<Vector> payload;
};

std::vector<AgentState> init_cikf_states(const FieldModel& model,
                                         const PseudoModel& pseudo, int agents);
std::vector<AgentState> init_consensus_states(const FieldModel& model, int agents);

/// Round-0 mailbox carrying every agent's initial pseudo-state prediction.
RoundMailbox cikf_initial_mailbox(const std::vector<AgentState>& states,
                                  const SensorNetwork& net);

/// Round-0 mailbox for the estimators whose first broadcast happens at the
/// end of round 0.
RoundMailbox empty_mailbox(const SensorNetwork& net);

/// One synchronous round of the consensus+innovations filter. Updates states
/// in place and returns the mailbox for the next round. update_order, when
/// given, only permutes the iteration; results are independent of it.
RoundMailbox cikf_round(std::vector<AgentState>& states, const RoundMailbox& mailbox,
                        const GainSchedule& schedule, const FieldModel& model,
                        const PseudoModel& pseudo, const SensorNetwork& net,
                        const std::vector<Vector>& observations,
                        const std::vector<int>* update_order = nullptr);

/// One round of the measurement-consensus filter: dynamic averaging of
/// pseudo-observations followed by a gain update of the field estimate.
RoundMailbox dikf_round(std::vector<AgentState>& states, const RoundMailbox& mailbox,
                        const ConsensusGainSchedule& gains, const FieldModel& model,
                        const PseudoModel& pseudo, const SensorNetwork& net,
                        const std::vector<Vector>& observations,
                        const std::vector<int>* update_order = nullptr);

/// One round of the innovation-consensus filter: dynamic averaging of local
/// pseudo-innovations followed by a gain update of the field estimate.
RoundMailbox pikf_round(std::vector<AgentState>& states, const RoundMailbox& mailbox,
                        const ConsensusGainSchedule& gains, const FieldModel& model,
                        const PseudoModel& pseudo, const SensorNetwork& net,
                        const std::vector<Vector>& observations,
                        const std::vector<int>* update_order = nullptr);

/// Centralized Kalman filter over the stacked observations of all agents.
struct CentralState {
  Vector x;  // prediction-form estimate
  Matrix P;  // prediction-form covariance
};

struct CkfStep {
  Vector x_filt;
  Matrix P_filt;
  CentralState next;
};

CentralState init_central(const FieldModel& model);

/// Stacked measurement update with block-diagonal noise, then time update.
CkfStep ckf_step(const CentralState& state, const FieldModel& model,
                 const SensorSuite& suite, const std::vector<Vector>& observations);

/// The centralized filter's covariances and gains are data-independent; this
/// computes them once for a horizon so per-trial work is state-only.
struct CkfTrajectory {
  Matrix H;                    // stacked observation matrix
  std::vector<Matrix> K;      // per time
  std::vector<Matrix> P_pred;  // per time
  std::vector<Matrix> P_filt;  // per time
};

CkfTrajectory ckf_covariance_trajectory(const FieldModel& model,
                                        const SensorSuite& suite, int horizon);

/// Stacks per-agent observations into one vector in agent order.
Vector stack_observations(const std::vector<Vector>& observations);

}  // namespace dkf
