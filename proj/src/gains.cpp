#include "dkf/gains.hpp"

#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "dkf/hashing.hpp"

namespace dkf {

namespace {

void require_joint(const JointCovariance& P, const char* op) {
  const Eigen::Index expect = 2 * P.agents * P.field_dim;
  if (P.P.rows() != expect || P.P.cols() != expect) {
    throw std::invalid_argument(std::string(op) + ": joint covariance size mismatch");
  }
}

void require_gains(const std::vector<AgentGains>& gains, const JointCovariance& P,
                   const SensorNetwork* net, const char* op) {
  if (static_cast<int>(gains.size()) != P.agents) {
    throw std::invalid_argument(std::string(op) + ": gain vector size mismatch");
  }
  if (net != nullptr) {
    for (int n = 0; n < P.agents; ++n) {
      if (static_cast<int>(gains[static_cast<size_t>(n)].B_neighbor.size()) !=
          net->degree(n)) {
        throw std::invalid_argument(std::string(op) +
                                    ": neighbor gain count mismatch, agent " +
                                    std::to_string(n));
      }
    }
  }
}

// Mutable block view into a joint matrix.
Eigen::Block<Matrix> blk(Matrix& m, Eigen::Index r, Eigen::Index c, Eigen::Index sz) {
  return m.block(r, c, sz, sz);
}

}  // namespace

double JointCovariance::total_x_trace() const {
  double t = 0.0;
  for (int n = 0; n < agents; ++n) t += x_trace(n);
  return t;
}

const AgentGains& GainSchedule::at(int time, int agent) const {
  if (time < 0 || agent < 0 || agent >= agents || steps.empty()) {
    throw std::out_of_range("GainSchedule::at");
  }
  // Runs longer than the schedule reuse the final gain set.
  const size_t t = std::min<size_t>(static_cast<size_t>(time), steps.size() - 1);
  return steps[t][static_cast<size_t>(agent)];
}

JointCovariance init_joint_covariance(const FieldModel& model,
                                      const PseudoModel& pseudo, int agents) {
  if (agents != pseudo.agent_count()) {
    throw std::invalid_argument("init_joint_covariance: agent count mismatch");
  }
  if (model.dim() != pseudo.dim()) {
    throw std::invalid_argument("init_joint_covariance: field dimension mismatch");
  }
  const Eigen::Index m = model.dim();

  // With identical initialization the errors are e_y^n = G (x0 - x0_mean)
  // and e_x^n = x0 - x0_mean for every agent, hence rank-one-in-agents
  // structure S Sigma0 S^T with S stacking [G; ...; G; I; ...; I].
  Matrix stack(2 * agents * m, m);
  for (int n = 0; n < agents; ++n) {
    stack.block(n * m, 0, m, m) = pseudo.G;
    stack.block((agents + n) * m, 0, m, m) = Matrix::Identity(m, m);
  }
  JointCovariance out;
  out.time_index = 0;
  out.agents = agents;
  out.field_dim = m;
  out.P = symmetrize(stack * model.x0_cov * stack.transpose());
  return out;
}

JointCovariance y_stage_covariance(const JointCovariance& P,
                                   const std::vector<AgentGains>& gains,
                                   const PseudoModel& pseudo,
                                   const SensorNetwork& net) {
  require_joint(P, "y_stage_covariance");
  require_gains(gains, P, &net, "y_stage_covariance");
  const Eigen::Index m = P.field_dim;
  const int agents = P.agents;
  const Eigen::Index dim = 2 * agents * m;

  Matrix phi = Matrix::Identity(dim, dim);
  for (int n = 0; n < agents; ++n) {
    const auto& g = gains[static_cast<size_t>(n)];
    const auto& nbrs = net.neighbors(n);
    Matrix self = Matrix::Identity(m, m) -
                  g.B_self * pseudo.H_tilde[static_cast<size_t>(n)];
    for (size_t j = 0; j < nbrs.size(); ++j) {
      self -= g.B_neighbor[j];
      blk(phi, P.y_offset(n), P.y_offset(nbrs[j]), m) = g.B_neighbor[j];
    }
    blk(phi, P.y_offset(n), P.y_offset(n), m) = self;
    blk(phi, P.y_offset(n), P.x_offset(n), m) =
        -g.B_self * pseudo.H_check[static_cast<size_t>(n)];
  }

  JointCovariance out = P;
  out.P = phi * P.P * phi.transpose();
  // Pseudo-observation noise is independent across agents; only the diagonal
  // y blocks pick it up.
  for (int n = 0; n < agents; ++n) {
    const auto& g = gains[static_cast<size_t>(n)];
    blk(out.P, P.y_offset(n), P.y_offset(n), m) +=
        g.B_self * pseudo.G_local[static_cast<size_t>(n)] * g.B_self.transpose();
  }
  out.P = symmetrize(out.P);
  return out;
}

JointCovariance x_stage_covariance(const JointCovariance& P,
                                   const std::vector<AgentGains>& gains,
                                   const PseudoModel& pseudo) {
  require_joint(P, "x_stage_covariance");
  require_gains(gains, P, nullptr, "x_stage_covariance");
  const Eigen::Index m = P.field_dim;
  const int agents = P.agents;
  const Eigen::Index dim = 2 * agents * m;

  Matrix phi = Matrix::Identity(dim, dim);
  for (int n = 0; n < agents; ++n) {
    const Matrix& K = gains[static_cast<size_t>(n)].K;
    blk(phi, P.x_offset(n), P.x_offset(n), m) =
        Matrix::Identity(m, m) - K * pseudo.G;
    blk(phi, P.x_offset(n), P.y_offset(n), m) = K;
  }

  JointCovariance out = P;
  out.P = symmetrize(phi * P.P * phi.transpose());
  return out;
}

JointCovariance filter_step_covariance(const JointCovariance& P,
                                       const std::vector<AgentGains>& gains,
                                       const PseudoModel& pseudo,
                                       const SensorNetwork& net) {
  JointCovariance mid = y_stage_covariance(P, gains, pseudo, net);
  JointCovariance out = x_stage_covariance(mid, gains, pseudo);
  auto proj = psd_project_logged(out.P);
  out.P = std::move(proj.projected);
  return out;
}

JointCovariance predict_step_covariance(const JointCovariance& P,
                                        const FieldModel& model,
                                        const PseudoModel& pseudo) {
  require_joint(P, "predict_step_covariance");
  if (model.dim() != P.field_dim) {
    throw std::invalid_argument("predict_step_covariance: dimension mismatch");
  }
  const Eigen::Index m = P.field_dim;
  const int agents = P.agents;
  const Eigen::Index dim = 2 * agents * m;

  Matrix phi = Matrix::Zero(dim, dim);
  Matrix inject(dim, m);  // common process noise enters every agent's errors
  for (int n = 0; n < agents; ++n) {
    blk(phi, P.y_offset(n), P.y_offset(n), m) = pseudo.A_tilde;
    blk(phi, P.y_offset(n), P.x_offset(n), m) = pseudo.A_check;
    blk(phi, P.x_offset(n), P.x_offset(n), m) = model.A;
    inject.block(P.y_offset(n), 0, m, m) = pseudo.G;
    inject.block(P.x_offset(n), 0, m, m) = Matrix::Identity(m, m);
  }

  JointCovariance out = P;
  out.time_index = P.time_index + 1;
  out.P = phi * P.P * phi.transpose() + inject * model.V * inject.transpose();
  auto proj = psd_project_logged(symmetrize(out.P));
  out.P = std::move(proj.projected);
  return out;
}

ConsensusGain gauss_markov_B(const JointCovariance& P, int n,
                             const PseudoModel& pseudo, const SensorNetwork& net) {
  require_joint(P, "gauss_markov_B");
  if (n < 0 || n >= P.agents) {
    throw std::invalid_argument("gauss_markov_B: invalid agent index");
  }
  const Eigen::Index m = P.field_dim;
  const auto& nbrs = net.neighbors(n);
  const auto deg = static_cast<Eigen::Index>(nbrs.size());
  const Eigen::Index rdim = (deg + 1) * m;
  const Matrix& Ht = pseudo.H_tilde[static_cast<size_t>(n)];
  const Matrix& Hc = pseudo.H_check[static_cast<size_t>(n)];

  // Residual stack: consensus differences e_y^n - e_y^l for each neighbor,
  // then the innovation Ht e_y^n + Hc e_x^n + eta^n.
  Matrix cross(m, rdim);   // Cov(e_y^n, residual)
  Matrix resid(rdim, rdim);  // Cov(residual)
  for (Eigen::Index j = 0; j < deg; ++j) {
    const int l = nbrs[static_cast<size_t>(j)];
    cross.block(0, j * m, m, m) = P.yy(n, n) - P.yy(n, l);
    for (Eigen::Index k = 0; k < deg; ++k) {
      const int l2 = nbrs[static_cast<size_t>(k)];
      resid.block(j * m, k * m, m, m) =
          P.yy(n, n) - P.yy(n, l2) - Matrix(P.yy(l, n)) + Matrix(P.yy(l, l2));
    }
    resid.block(j * m, deg * m, m, m) =
        (P.yy(n, n) - Matrix(P.yy(l, n))) * Ht.transpose() +
        (P.yx(n, n) - Matrix(P.yx(l, n))) * Hc.transpose();
  }
  cross.block(0, deg * m, m, m) =
      P.yy(n, n) * Ht.transpose() + P.yx(n, n) * Hc.transpose();
  resid.block(deg * m, deg * m, m, m) =
      Ht * P.yy(n, n) * Ht.transpose() + Ht * P.yx(n, n) * Hc.transpose() +
      Hc * P.yx(n, n).transpose() * Ht.transpose() +
      Hc * P.xx(n, n) * Hc.transpose() + pseudo.G_local[static_cast<size_t>(n)];
  for (Eigen::Index j = 0; j < deg; ++j) {
    resid.block(deg * m, j * m, m, m) = resid.block(j * m, deg * m, m, m).transpose();
  }

  const Matrix W = cross * pseudo_inverse(symmetrize(resid));
  ConsensusGain out;
  out.neighbor.reserve(static_cast<size_t>(deg));
  for (Eigen::Index j = 0; j < deg; ++j) {
    out.neighbor.push_back(W.block(0, j * m, m, m));
  }
  out.self = W.block(0, deg * m, m, m);
  return out;
}

Matrix gauss_markov_K(const JointCovariance& P, int n, const PseudoModel& pseudo) {
  require_joint(P, "gauss_markov_K");
  if (n < 0 || n >= P.agents) {
    throw std::invalid_argument("gauss_markov_K: invalid agent index");
  }
  // Residual s = G e_x^n - e_y_filt^n; the y block of P must already be in
  // post-y-stage form.
  const Matrix cross = P.xx(n, n) * pseudo.G.transpose() - Matrix(P.yx(n, n).transpose());
  const Matrix resid = pseudo.G * P.xx(n, n) * pseudo.G.transpose() -
                       pseudo.G * Matrix(P.yx(n, n).transpose()) -
                       P.yx(n, n) * pseudo.G.transpose() + Matrix(P.yy(n, n));
  return cross * pseudo_inverse(symmetrize(resid));
}

namespace {

std::vector<AgentGains> static_b_gains(const SensorNetwork& net, Eigen::Index m,
                                       double alpha, double beta) {
  std::vector<AgentGains> gains(static_cast<size_t>(net.node_count()));
  for (int n = 0; n < net.node_count(); ++n) {
    auto& g = gains[static_cast<size_t>(n)];
    g.B_self = alpha * Matrix::Identity(m, m);
    g.B_neighbor.assign(static_cast<size_t>(net.degree(n)),
                        beta * Matrix::Identity(m, m));
    g.K = Matrix::Zero(m, m);
  }
  return gains;
}

}  // namespace

double resolve_beta(const GainConfig& config, const SensorNetwork& net) {
  if (config.beta >= 0.0) return config.beta;
  const double lmax = net.lambda_max();
  return lmax > 0.0 ? 1.0 / lmax : 0.0;
}

GainSchedule precompute_schedule(const FieldModel& model, const SensorSuite& suite,
                                 const SensorNetwork& net, const PseudoModel& pseudo,
                                 const GainConfig& config) {
  model.validate();
  suite.validate(model.dim());
  if (!net.connected()) {
    throw std::runtime_error("precompute_schedule: network disconnected");
  }
  if (net.node_count() != suite.agent_count()) {
    throw std::invalid_argument("precompute_schedule: graph/sensor agent mismatch");
  }
  if (config.horizon < 0) {
    throw std::invalid_argument("precompute_schedule: negative horizon");
  }

  const Eigen::Index m = model.dim();
  const int agents = net.node_count();
  const double beta = resolve_beta(config, net);
  const double ceiling =
      config.ceiling_factor * (model.x0_cov.trace() + model.V.trace()) *
      static_cast<double>(agents);

  GainSchedule sched;
  sched.agents = agents;
  sched.field_dim = m;
  sched.horizon = config.horizon;
  sched.mode = config.mode;
  sched.model_hash = scenario_hash(model, suite, net);
  sched.steps.reserve(static_cast<size_t>(config.horizon) + 1);
  sched.predicted_mse.reserve(static_cast<size_t>(config.horizon) + 1);

  if (config.mode == GainMode::kStatic && net.lambda_max() > 0.0) {
    const double bound = 2.0 / net.lambda_max();
    if (beta <= 0.0 || beta >= bound) {
      sched.warnings.push_back(
          "static consensus weight beta outside stability range (0, " +
          std::to_string(bound) + ")");
    }
  }

  JointCovariance P = init_joint_covariance(model, pseudo, agents);
  bool contraction_warned = false;

  for (int i = 0; i <= config.horizon; ++i) {
    std::vector<AgentGains> gains;
    if (config.mode == GainMode::kOptimal) {
      gains.resize(static_cast<size_t>(agents));
      for (int n = 0; n < agents; ++n) {
        ConsensusGain b = gauss_markov_B(P, n, pseudo, net);
        gains[static_cast<size_t>(n)].B_neighbor = std::move(b.neighbor);
        gains[static_cast<size_t>(n)].B_self = std::move(b.self);
      }
    } else {
      gains = static_b_gains(net, m, config.alpha, beta);
    }

    JointCovariance mid = y_stage_covariance(P, gains, pseudo, net);
    for (int n = 0; n < agents; ++n) {
      const double before = P.y_trace(n);
      const double after = mid.y_trace(n);
      if (config.mode == GainMode::kOptimal) {
        if (after > before + 1e-7 * (1.0 + before)) {
          throw std::runtime_error(
              "precompute_schedule: consensus stage increased error trace");
        }
      } else if (!contraction_warned && after > before + 1e-9 * (1.0 + before)) {
        sched.warnings.push_back("static gains: consensus stage not contracting at round " +
                                 std::to_string(i));
        contraction_warned = true;
      }
    }

    for (int n = 0; n < agents; ++n) {
      gains[static_cast<size_t>(n)].K =
          config.mode == GainMode::kOptimal
              ? gauss_markov_K(mid, n, pseudo)
              : config.kappa * Matrix::Identity(m, m);
    }

    JointCovariance filt = x_stage_covariance(mid, gains, pseudo);
    auto proj = psd_project_logged(filt.P);
    filt.P = std::move(proj.projected);
    sched.max_psd_clip = std::max(sched.max_psd_clip, proj.clipped);

    if (config.mode == GainMode::kOptimal) {
      for (int n = 0; n < agents; ++n) {
        const double before = mid.x_trace(n);
        const double after = filt.x_trace(n);
        if (after > before + 1e-7 * (1.0 + before)) {
          throw std::runtime_error(
              "precompute_schedule: field update increased error trace");
        }
      }
    }

    std::vector<double> mse(static_cast<size_t>(agents));
    for (int n = 0; n < agents; ++n) mse[static_cast<size_t>(n)] = filt.x_trace(n);
    sched.predicted_mse.push_back(std::move(mse));
    sched.steps.push_back(std::move(gains));

    if (filt.total_x_trace() > ceiling) {
      throw std::runtime_error(
          "precompute_schedule: unbounded covariance (trace " +
          std::to_string(filt.total_x_trace()) + " exceeds ceiling " +
          std::to_string(ceiling) + ")");
    }

    if (i < config.horizon) {
      P = predict_step_covariance(filt, model, pseudo);
    }
  }
  return sched;
}

// ---------------------------------------------------------------------------
// Gain design for the measurement- and innovation-consensus estimators.
//
// Both track the second moment of an augmented linear error system exactly:
// consensus state errors, per-agent field errors, and whatever memory the
// recursion carries (previous local signal, previous observation noise, the
// centered field itself). The Gauss-Markov K then drops out of the same
// cross-covariance formula used for the joint recursion above.
// ---------------------------------------------------------------------------

namespace {

struct ConsensusEngineSetup {
  Eigen::Index dim = 0;              // augmented state size
  Matrix init;                       // S_0
  Matrix phi;                        // transition, rebuilt per step is not
                                     // needed: both systems are time-invariant
  Matrix inject;                     // noise injection
  Matrix noise;                      // Cov of [v; eta_1..eta_N]
};

Matrix consensus_noise_cov(const FieldModel& model, const PseudoModel& pseudo) {
  const Eigen::Index m = model.dim();
  const int agents = pseudo.agent_count();
  Matrix q = Matrix::Zero((agents + 1) * m, (agents + 1) * m);
  q.topLeftCorner(m, m) = model.V;
  for (int n = 0; n < agents; ++n) {
    q.block((1 + n) * m, (1 + n) * m, m, m) = pseudo.G_local[static_cast<size_t>(n)];
  }
  return q;
}

// Consensus mixing weight for the pair (n, l): entry of I - beta*L.
double mixing_weight(const SensorNetwork& net, double beta, int n, int l) {
  if (n == l) return 1.0 - beta * net.laplacian()(n, n);
  return -beta * net.laplacian()(n, l);
}

ConsensusGainSchedule run_consensus_engine(
    const FieldModel& model, const SensorNetwork& net, const PseudoModel& pseudo,
    const GainConfig& config, const ConsensusEngineSetup& setup,
    // Offsets of the consensus block and the field-error block for agent n.
    const std::function<Eigen::Index(int)>& consensus_offset,
    const std::function<Eigen::Index(int)>& error_offset,
    // Whether the filter residual is c^n + G e_x^n (measurement consensus)
    // or just the consensus state itself (innovation consensus).
    bool residual_includes_field_term) {
  const Eigen::Index m = model.dim();
  const int agents = net.node_count();
  const double ceiling =
      config.ceiling_factor * (model.x0_cov.trace() + model.V.trace()) *
      static_cast<double>(agents);

  ConsensusGainSchedule sched;
  sched.agents = agents;
  sched.field_dim = m;
  sched.horizon = config.horizon;
  sched.mode = config.mode;
  sched.beta = resolve_beta(config, net);
  if (net.lambda_max() > 0.0) {
    const double bound = 2.0 / net.lambda_max();
    if (sched.beta <= 0.0 || sched.beta >= bound) {
      sched.warnings.push_back(
          "consensus weight beta outside stability range (0, " +
          std::to_string(bound) + ")");
    }
  }

  Matrix S = setup.init;
  const Matrix noise_term = setup.inject * setup.noise * setup.inject.transpose();

  for (int i = 0; i <= config.horizon; ++i) {
    if (i > 0) {
      S = symmetrize(setup.phi * S * setup.phi.transpose() + noise_term);
      if (i % 50 == 0) S = psd_project(S);
    }

    std::vector<Matrix> K(static_cast<size_t>(agents));
    std::vector<double> mse(static_cast<size_t>(agents));

    // Residual r^n = c^n (+ G e_x^n); gain K = Cov(e_x, r) pinv(Cov(r)).
    for (int n = 0; n < agents; ++n) {
      const Eigen::Index co = consensus_offset(n);
      const Eigen::Index eo = error_offset(n);
      const Matrix Scc = S.block(co, co, m, m);
      const Matrix Sec = S.block(eo, co, m, m);
      const Matrix See = S.block(eo, eo, m, m);
      Matrix cross = Sec;
      Matrix resid = Scc;
      if (residual_includes_field_term) {
        cross += See * pseudo.G.transpose();
        resid += Sec.transpose() * pseudo.G.transpose() + pseudo.G * Sec +
                 pseudo.G * See * pseudo.G.transpose();
      }
      K[static_cast<size_t>(n)] =
          config.mode == GainMode::kOptimal
              ? Matrix(cross * pseudo_inverse(symmetrize(resid)))
              : Matrix(config.kappa * Matrix::Identity(m, m));
    }

    // Apply e_x^n <- e_x^n - K (c^n [+ G e_x^n]) jointly.
    Matrix upd = Matrix::Identity(setup.dim, setup.dim);
    for (int n = 0; n < agents; ++n) {
      const Eigen::Index co = consensus_offset(n);
      const Eigen::Index eo = error_offset(n);
      const Matrix& Kn = K[static_cast<size_t>(n)];
      upd.block(eo, co, m, m) = -Kn;
      if (residual_includes_field_term) {
        upd.block(eo, eo, m, m) = Matrix::Identity(m, m) - Kn * pseudo.G;
      }
    }
    S = symmetrize(upd * S * upd.transpose());

    double total = 0.0;
    for (int n = 0; n < agents; ++n) {
      const Eigen::Index eo = error_offset(n);
      mse[static_cast<size_t>(n)] = S.block(eo, eo, m, m).trace();
      total += mse[static_cast<size_t>(n)];
    }
    sched.K.push_back(std::move(K));
    sched.predicted_mse.push_back(std::move(mse));

    if (total > ceiling) {
      throw std::runtime_error("consensus gain design: unbounded covariance (trace " +
                               std::to_string(total) + " exceeds ceiling " +
                               std::to_string(ceiling) + ")");
    }
  }
  return sched;
}

}  // namespace

ConsensusGainSchedule precompute_dikf_gains(const FieldModel& model,
                                            const SensorSuite& suite,
                                            const SensorNetwork& net,
                                            const PseudoModel& pseudo,
                                            const GainConfig& config) {
  model.validate();
  suite.validate(model.dim());
  if (!net.connected()) {
    throw std::runtime_error("precompute_dikf_gains: network disconnected");
  }
  const Eigen::Index m = model.dim();
  const int agents = net.node_count();
  const double beta = resolve_beta(config, net);

  // Augmented state: [c^1..c^N; e_x^1..e_x^N; x_centered; eta_prev^1..^N],
  // where c^n is the consensus estimate's deviation from the pseudo-state.
  const Eigen::Index dim = (3 * agents + 1) * m;
  const auto c_off = [m](int n) { return static_cast<Eigen::Index>(n) * m; };
  const auto e_off = [m, agents](int n) {
    return static_cast<Eigen::Index>(agents + n) * m;
  };
  const Eigen::Index x_off = static_cast<Eigen::Index>(2 * agents) * m;
  const auto eta_off = [m, agents](int n) {
    return static_cast<Eigen::Index>(2 * agents + 1 + n) * m;
  };

  ConsensusEngineSetup setup;
  setup.dim = dim;
  setup.noise = consensus_noise_cov(model, pseudo);

  // Initial injection from [x_centered; eta_0].
  Matrix lam = Matrix::Zero(dim, (agents + 1) * m);
  for (int n = 0; n < agents; ++n) {
    const Matrix gdiff = pseudo.G_local[static_cast<size_t>(n)] - pseudo.G;
    lam.block(c_off(n), 0, m, m) = gdiff;
    lam.block(c_off(n), (1 + n) * m, m, m) = Matrix::Identity(m, m);
    lam.block(e_off(n), 0, m, m) = Matrix::Identity(m, m);
    lam.block(eta_off(n), (1 + n) * m, m, m) = Matrix::Identity(m, m);
  }
  lam.block(x_off, 0, m, m) = Matrix::Identity(m, m);
  Matrix init_cov = Matrix::Zero((agents + 1) * m, (agents + 1) * m);
  init_cov.topLeftCorner(m, m) = model.x0_cov;
  for (int n = 0; n < agents; ++n) {
    init_cov.block((1 + n) * m, (1 + n) * m, m, m) =
        pseudo.G_local[static_cast<size_t>(n)];
  }
  setup.init = symmetrize(lam * init_cov * lam.transpose());

  setup.phi = Matrix::Zero(dim, dim);
  setup.inject = Matrix::Zero(dim, (agents + 1) * m);
  const Matrix a_minus_i = model.A - Matrix::Identity(m, m);
  for (int n = 0; n < agents; ++n) {
    const Matrix gdiff = pseudo.G_local[static_cast<size_t>(n)] - pseudo.G;
    for (int l = 0; l < agents; ++l) {
      const double w = mixing_weight(net, beta, n, l);
      if (w != 0.0) {
        setup.phi.block(c_off(n), c_off(l), m, m) = w * Matrix::Identity(m, m);
      }
    }
    setup.phi.block(c_off(n), x_off, m, m) = gdiff * a_minus_i;
    setup.phi.block(c_off(n), eta_off(n), m, m) = -Matrix::Identity(m, m);
    setup.phi.block(e_off(n), e_off(n), m, m) = model.A;
    setup.inject.block(c_off(n), 0, m, m) = gdiff;
    setup.inject.block(c_off(n), (1 + n) * m, m, m) = Matrix::Identity(m, m);
    setup.inject.block(e_off(n), 0, m, m) = Matrix::Identity(m, m);
    setup.inject.block(eta_off(n), (1 + n) * m, m, m) = Matrix::Identity(m, m);
  }
  setup.phi.block(x_off, x_off, m, m) = model.A;
  setup.inject.block(x_off, 0, m, m) = Matrix::Identity(m, m);

  return run_consensus_engine(model, net, pseudo, config, setup, c_off, e_off,
                              /*residual_includes_field_term=*/true);
}

ConsensusGainSchedule precompute_pikf_gains(const FieldModel& model,
                                            const SensorSuite& suite,
                                            const SensorNetwork& net,
                                            const PseudoModel& pseudo,
                                            const GainConfig& config) {
  model.validate();
  suite.validate(model.dim());
  if (!net.connected()) {
    throw std::runtime_error("precompute_pikf_gains: network disconnected");
  }
  const Eigen::Index m = model.dim();
  const int agents = net.node_count();
  const double beta = resolve_beta(config, net);

  // Augmented state: [nu_hat^1..^N; e_x^1..^N; nu_prev^1..^N]. The local
  // pseudo-innovation nu^n = G_n e_x^n + eta^n is itself error-driven, so no
  // raw field block is needed.
  const Eigen::Index dim = 3 * agents * m;
  const auto nu_off = [m](int n) { return static_cast<Eigen::Index>(n) * m; };
  const auto e_off = [m, agents](int n) {
    return static_cast<Eigen::Index>(agents + n) * m;
  };
  const auto prev_off = [m, agents](int n) {
    return static_cast<Eigen::Index>(2 * agents + n) * m;
  };

  ConsensusEngineSetup setup;
  setup.dim = dim;
  setup.noise = consensus_noise_cov(model, pseudo);

  Matrix lam = Matrix::Zero(dim, (agents + 1) * m);
  for (int n = 0; n < agents; ++n) {
    const Matrix& gn = pseudo.G_local[static_cast<size_t>(n)];
    lam.block(nu_off(n), 0, m, m) = gn;
    lam.block(nu_off(n), (1 + n) * m, m, m) = Matrix::Identity(m, m);
    lam.block(e_off(n), 0, m, m) = Matrix::Identity(m, m);
    lam.block(prev_off(n), 0, m, m) = gn;
    lam.block(prev_off(n), (1 + n) * m, m, m) = Matrix::Identity(m, m);
  }
  Matrix init_cov = Matrix::Zero((agents + 1) * m, (agents + 1) * m);
  init_cov.topLeftCorner(m, m) = model.x0_cov;
  for (int n = 0; n < agents; ++n) {
    init_cov.block((1 + n) * m, (1 + n) * m, m, m) =
        pseudo.G_local[static_cast<size_t>(n)];
  }
  setup.init = symmetrize(lam * init_cov * lam.transpose());

  setup.phi = Matrix::Zero(dim, dim);
  setup.inject = Matrix::Zero(dim, (agents + 1) * m);
  for (int n = 0; n < agents; ++n) {
    const Matrix& gn = pseudo.G_local[static_cast<size_t>(n)];
    const Matrix gna = gn * model.A;
    for (int l = 0; l < agents; ++l) {
      const double w = mixing_weight(net, beta, n, l);
      if (w != 0.0) {
        setup.phi.block(nu_off(n), nu_off(l), m, m) = w * Matrix::Identity(m, m);
      }
    }
    setup.phi.block(nu_off(n), e_off(n), m, m) = gna;
    setup.phi.block(nu_off(n), prev_off(n), m, m) = -Matrix::Identity(m, m);
    setup.phi.block(e_off(n), e_off(n), m, m) = model.A;
    setup.phi.block(prev_off(n), e_off(n), m, m) = gna;
    setup.inject.block(nu_off(n), 0, m, m) = gn;
    setup.inject.block(nu_off(n), (1 + n) * m, m, m) = Matrix::Identity(m, m);
    setup.inject.block(e_off(n), 0, m, m) = Matrix::Identity(m, m);
    setup.inject.block(prev_off(n), 0, m, m) = gn;
    setup.inject.block(prev_off(n), (1 + n) * m, m, m) = Matrix::Identity(m, m);
  }

  return run_consensus_engine(model, net, pseudo, config, setup, nu_off, e_off,
                              /*residual_includes_field_term=*/false);
}

// ---------------------------------------------------------------------------
// Binary schedule serialization. Raw little-endian doubles so that
// round-trips are bit-exact.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'K', 'F', 'G', 'A', 'I', 'N', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_matrix(std::ostream& os, const Matrix& mat) {
  put_u32(os, static_cast<std::uint32_t>(mat.rows()));
  put_u32(os, static_cast<std::uint32_t>(mat.cols()));
  for (Eigen::Index i = 0; i < mat.rows(); ++i) {
    for (Eigen::Index j = 0; j < mat.cols(); ++j) {
      const double v = mat(i, j);
      os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
Matrix get_matrix(std::istream& is) {
  const auto rows = static_cast<Eigen::Index>(get_u32(is));
  const auto cols = static_cast<Eigen::Index>(get_u32(is));
  Matrix mat(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      double v = 0.0;
      is.read(reinterpret_cast<char*>(&v), sizeof(v));
      mat(i, j) = v;
    }
  }
  return mat;
}

}  // namespace

void GainSchedule::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("GainSchedule::save: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, static_cast<std::uint32_t>(agents));
  put_u32(os, static_cast<std::uint32_t>(field_dim));
  put_u32(os, static_cast<std::uint32_t>(horizon));
  put_u32(os, mode == GainMode::kOptimal ? 0u : 1u);
  put_u64(os, model_hash);
  for (const auto& step : steps) {
    for (const auto& g : step) {
      put_u32(os, static_cast<std::uint32_t>(g.B_neighbor.size()));
      for (const auto& b : g.B_neighbor) put_matrix(os, b);
      put_matrix(os, g.B_self);
      put_matrix(os, g.K);
    }
  }
  for (const auto& row : predicted_mse) {
    for (double v : row) os.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  const double clip = max_psd_clip;
  os.write(reinterpret_cast<const char*>(&clip), sizeof(clip));
  if (!os) throw std::runtime_error("GainSchedule::save: write failed");
}

GainSchedule GainSchedule::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("GainSchedule::load: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("GainSchedule::load: bad magic");
  }
  GainSchedule sched;
  sched.agents = static_cast<int>(get_u32(is));
  sched.field_dim = static_cast<Eigen::Index>(get_u32(is));
  sched.horizon = static_cast<int>(get_u32(is));
  sched.mode = get_u32(is) == 0u ? GainMode::kOptimal : GainMode::kStatic;
  sched.model_hash = get_u64(is);
  sched.steps.resize(static_cast<size_t>(sched.horizon) + 1);
  for (auto& step : sched.steps) {
    step.resize(static_cast<size_t>(sched.agents));
    for (auto& g : step) {
      const auto nbrs = get_u32(is);
      g.B_neighbor.resize(nbrs);
      for (auto& b : g.B_neighbor) b = get_matrix(is);
      g.B_self = get_matrix(is);
      g.K = get_matrix(is);
    }
  }
  sched.predicted_mse.resize(static_cast<size_t>(sched.horizon) + 1);
  for (auto& row : sched.predicted_mse) {
    row.resize(static_cast<size_t>(sched.agents));
    for (double& v : row) is.read(reinterpret_cast<char*>(&v), sizeof(v));
  }
  is.read(reinterpret_cast<char*>(&sched.max_psd_clip), sizeof(double));
  if (!is) throw std::runtime_error("GainSchedule::load: truncated file");
  return sched;
}

}  // namespace dkf
