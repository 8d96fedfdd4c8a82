#include "dkf/estimators.hpp"

#include <stdexcept>

namespace dkf {

namespace {

void check_round_inputs(const std::vector<AgentState>& states,
                        const RoundMailbox& mailbox, const SensorNetwork& net,
                        const std::vector<Vector>& observations, bool needs_inbox,
                        const char* op) {
  const auto agents = static_cast<size_t>(net.node_count());
  if (states.size() != agents || observations.size() != agents) {
    throw std::invalid_argument(std::string(op) + ": agent count mismatch");
  }
  if (needs_inbox && mailbox.payload.size() != agents) {
    throw std::invalid_argument(std::string(op) + ": mailbox/round mismatch");
  }
}

RoundMailbox deliver(std::vector<Vector>&& payload, int next_round) {
  RoundMailbox mb;
  mb.round_index = next_round;
  mb.payload = std::move(payload);
  return mb;
}

const std::vector<int>& natural_order(int agents, std::vector<int>& scratch,
                                      const std::vector<int>* update_order) {
  if (update_order != nullptr) {
    if (static_cast<int>(update_order->size()) != agents) {
      throw std::invalid_argument("update order must list every agent once");
    }
    return *update_order;
  }
  scratch.resize(static_cast<size_t>(agents));
  for (int n = 0; n < agents; ++n) scratch[static_cast<size_t>(n)] = n;
  return scratch;
}

const Matrix& consensus_gain_at(const ConsensusGainSchedule& gains, int time,
                                int agent) {
  if (gains.K.empty()) throw std::out_of_range("consensus gain schedule empty");
  const size_t t = std::min<size_t>(static_cast<size_t>(time), gains.K.size() - 1);
  return gains.K[t][static_cast<size_t>(agent)];
}

}  // namespace

std::vector<AgentState> init_cikf_states(const FieldModel& model,
                                         const PseudoModel& pseudo, int agents) {
  std::vector<AgentState> states(static_cast<size_t>(agents));
  const Vector y0 = pseudo.G * model.x0_mean;
  for (int n = 0; n < agents; ++n) {
    auto& st = states[static_cast<size_t>(n)];
    st.id = n;
    st.x_pred = model.x0_mean;
    st.y_pred = y0;
    st.x_filt = model.x0_mean;
    st.y_filt = y0;
  }
  return states;
}

std::vector<AgentState> init_consensus_states(const FieldModel& model, int agents) {
  std::vector<AgentState> states(static_cast<size_t>(agents));
  for (int n = 0; n < agents; ++n) {
    auto& st = states[static_cast<size_t>(n)];
    st.id = n;
    st.x_pred = model.x0_mean;
    st.x_filt = model.x0_mean;
  }
  return states;
}

RoundMailbox cikf_initial_mailbox(const std::vector<AgentState>& states,
                                  const SensorNetwork& net) {
  (void)net;
  std::vector<Vector> payload;
  payload.reserve(states.size());
  for (const auto& st : states) payload.push_back(st.y_pred);
  return deliver(std::move(payload), 0);
}

RoundMailbox empty_mailbox(const SensorNetwork& net) {
  (void)net;
  RoundMailbox mb;
  mb.round_index = 0;
  return mb;
}

RoundMailbox cikf_round(std::vector<AgentState>& states, const RoundMailbox& mailbox,
                        const GainSchedule& schedule, const FieldModel& model,
                        const PseudoModel& pseudo, const SensorNetwork& net,
                        const std::vector<Vector>& observations,
                        const std::vector<int>* update_order) {
  check_round_inputs(states, mailbox, net, observations, true, "cikf_round");
  const int i = mailbox.round_index;
  const int agents = net.node_count();
  const Eigen::Index m = pseudo.dim();

  std::vector<int> scratch;
  const auto& order = natural_order(agents, scratch, update_order);

  std::vector<Vector> payload(static_cast<size_t>(agents));
  Vector ztil(m), resid(m), diff(m);
  for (int n : order) {
    auto& st = states[static_cast<size_t>(n)];
    const auto un = static_cast<size_t>(n);
    const AgentGains& g = schedule.at(i, n);
    const auto& nbrs = net.neighbors(n);

    ztil.noalias() = pseudo.obs_transform[un] * observations[un];

    // Consensus on neighbors' predictions plus the local pseudo-innovation.
    st.y_filt = st.y_pred;
    for (size_t j = 0; j < nbrs.size(); ++j) {
      diff = mailbox.payload[static_cast<size_t>(nbrs[j])] - st.y_pred;
      st.y_filt.noalias() += g.B_neighbor[j] * diff;
    }
    resid = ztil;
    resid.noalias() -= pseudo.H_tilde[un] * st.y_pred;
    resid.noalias() -= pseudo.H_check[un] * st.x_pred;
    st.y_filt.noalias() += g.B_self * resid;

    resid = st.y_filt;
    resid.noalias() -= pseudo.G * st.x_pred;
    st.x_filt = st.x_pred;
    st.x_filt.noalias() += g.K * resid;

    st.y_pred.noalias() = pseudo.A_tilde * st.y_filt;
    st.y_pred.noalias() += pseudo.A_check * st.x_filt;
    st.x_pred.noalias() = model.A * st.x_filt;

    payload[un] = st.y_pred;
  }
  return deliver(std::move(payload), i + 1);
}

RoundMailbox dikf_round(std::vector<AgentState>& states, const RoundMailbox& mailbox,
                        const ConsensusGainSchedule& gains, const FieldModel& model,
                        const PseudoModel& pseudo, const SensorNetwork& net,
                        const std::vector<Vector>& observations,
                        const std::vector<int>* update_order) {
  const int i = mailbox.round_index;
  check_round_inputs(states, mailbox, net, observations, i > 0, "dikf_round");
  const int agents = net.node_count();
  const Eigen::Index m = pseudo.dim();

  std::vector<int> scratch;
  const auto& order = natural_order(agents, scratch, update_order);

  std::vector<Vector> payload(static_cast<size_t>(agents));
  Vector ztil(m), resid(m);
  for (int n : order) {
    auto& st = states[static_cast<size_t>(n)];
    const auto un = static_cast<size_t>(n);

    ztil.noalias() = pseudo.obs_transform[un] * observations[un];

    if (i == 0) {
      st.y_filt = ztil;
    } else {
      Vector next = st.y_filt;
      for (int l : net.neighbors(n)) {
        next -= gains.beta * (st.y_filt - mailbox.payload[static_cast<size_t>(l)]);
      }
      next += ztil - st.aux_prev;
      st.y_filt = std::move(next);
    }

    resid = st.y_filt;
    resid.noalias() -= pseudo.G * st.x_pred;
    st.x_filt = st.x_pred;
    st.x_filt.noalias() += consensus_gain_at(gains, i, n) * resid;
    st.x_pred.noalias() = model.A * st.x_filt;

    st.aux_prev = ztil;
    payload[un] = st.y_filt;
  }
  return deliver(std::move(payload), i + 1);
}

RoundMailbox pikf_round(std::vector<AgentState>& states, const RoundMailbox& mailbox,
                        const ConsensusGainSchedule& gains, const FieldModel& model,
                        const PseudoModel& pseudo, const SensorNetwork& net,
                        const std::vector<Vector>& observations,
                        const std::vector<int>* update_order) {
  const int i = mailbox.round_index;
  check_round_inputs(states, mailbox, net, observations, i > 0, "pikf_round");
  const int agents = net.node_count();
  const Eigen::Index m = pseudo.dim();

  std::vector<int> scratch;
  const auto& order = natural_order(agents, scratch, update_order);

  std::vector<Vector> payload(static_cast<size_t>(agents));
  Vector nu(m);
  for (int n : order) {
    auto& st = states[static_cast<size_t>(n)];
    const auto un = static_cast<size_t>(n);

    nu.noalias() = pseudo.obs_transform[un] * observations[un];
    nu.noalias() -= pseudo.G_local[un] * st.x_pred;

    if (i == 0) {
      st.y_filt = nu;
    } else {
      Vector next = st.y_filt;
      for (int l : net.neighbors(n)) {
        next -= gains.beta * (st.y_filt - mailbox.payload[static_cast<size_t>(l)]);
      }
      next += nu - st.aux_prev;
      st.y_filt = std::move(next);
    }

    st.x_filt = st.x_pred;
    st.x_filt.noalias() += consensus_gain_at(gains, i, n) * st.y_filt;
    st.x_pred.noalias() = model.A * st.x_filt;

    st.aux_prev = nu;
    payload[un] = st.y_filt;
  }
  return deliver(std::move(payload), i + 1);
}

// ---------------------------------------------------------------------------
// Centralized baseline
// ---------------------------------------------------------------------------

namespace {

struct Stacked {
  Matrix H;
  Matrix R;
};

Stacked stacked_sensor(const SensorSuite& suite, Eigen::Index field_dim) {
  Eigen::Index total = 0;
  for (int n = 0; n < suite.agent_count(); ++n) total += suite.obs_dim(n);
  Stacked s;
  s.H = Matrix::Zero(total, field_dim);
  s.R = Matrix::Zero(total, total);
  Eigen::Index row = 0;
  for (int n = 0; n < suite.agent_count(); ++n) {
    const auto un = static_cast<size_t>(n);
    const Eigen::Index mn = suite.obs_dim(n);
    s.H.block(row, 0, mn, field_dim) = suite.H[un];
    s.R.block(row, row, mn, mn) = suite.R[un];
    row += mn;
  }
  return s;
}

}  // namespace

Vector stack_observations(const std::vector<Vector>& observations) {
  Eigen::Index total = 0;
  for (const auto& z : observations) total += z.size();
  Vector out(total);
  Eigen::Index row = 0;
  for (const auto& z : observations) {
    out.segment(row, z.size()) = z;
    row += z.size();
  }
  return out;
}

CentralState init_central(const FieldModel& model) {
  return {model.x0_mean, model.x0_cov};
}

CkfStep ckf_step(const CentralState& state, const FieldModel& model,
                 const SensorSuite& suite, const std::vector<Vector>& observations) {
  if (static_cast<int>(observations.size()) != suite.agent_count()) {
    throw std::invalid_argument("ckf_step: observation count mismatch");
  }
  const Eigen::Index m = model.dim();
  if (state.x.size() != m || state.P.rows() != m) {
    throw std::invalid_argument("ckf_step: state dimension mismatch");
  }
  const Stacked s = stacked_sensor(suite, m);
  const Vector z = stack_observations(observations);
  if (z.size() != s.H.rows()) {
    throw std::invalid_argument("ckf_step: stacked observation size mismatch");
  }

  const Matrix S = symmetrize(s.H * state.P * s.H.transpose() + s.R);
  Eigen::LLT<Matrix> llt(S);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("ckf_step: innovation covariance not positive definite");
  }
  const Matrix K = llt.solve(s.H * state.P).transpose();

  CkfStep out;
  out.x_filt = state.x + K * (z - s.H * state.x);
  const Matrix ikh = Matrix::Identity(m, m) - K * s.H;
  out.P_filt = symmetrize(ikh * state.P * ikh.transpose() + K * s.R * K.transpose());
  out.next.x = model.A * out.x_filt;
  out.next.P = symmetrize(model.A * out.P_filt * model.A.transpose() + model.V);
  return out;
}

CkfTrajectory ckf_covariance_trajectory(const FieldModel& model,
                                        const SensorSuite& suite, int horizon) {
  const Eigen::Index m = model.dim();
  const Stacked s = stacked_sensor(suite, m);
  CkfTrajectory traj;
  traj.H = s.H;
  traj.K.reserve(static_cast<size_t>(horizon) + 1);
  traj.P_pred.reserve(static_cast<size_t>(horizon) + 1);
  traj.P_filt.reserve(static_cast<size_t>(horizon) + 1);

  Matrix P = model.x0_cov;
  for (int i = 0; i <= horizon; ++i) {
    traj.P_pred.push_back(P);
    const Matrix S = symmetrize(s.H * P * s.H.transpose() + s.R);
    Eigen::LLT<Matrix> llt(S);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error(
          "ckf_covariance_trajectory: innovation covariance not positive definite");
    }
    const Matrix K = llt.solve(s.H * P).transpose();
    const Matrix ikh = Matrix::Identity(m, m) - K * s.H;
    const Matrix Pf = symmetrize(ikh * P * ikh.transpose() + K * s.R * K.transpose());
    traj.K.push_back(K);
    traj.P_filt.push_back(Pf);
    P = symmetrize(model.A * Pf * model.A.transpose() + model.V);
  }
  return traj;
}

}  // namespace dkf
