#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "dkf/estimators.hpp"
#include "dkf/gains.hpp"
#include "dkf/model.hpp"
#include "dkf/network.hpp"
#include "dkf/pseudo.hpp"
#include "test_util.hpp"

using namespace dkf;
using test::max_abs;

namespace {

struct ScalarScenario {
  FieldModel model;
  SensorSuite suite;
  SensorNetwork net;
  PseudoModel pseudo;
};

// Single agent, H = R = 1 so the information matrix is 1.
ScalarScenario scalar_scenario(double a, double v, double sigma0) {
  ScalarScenario sc;
  sc.model.A = a * Matrix::Identity(1, 1);
  sc.model.V = v * Matrix::Identity(1, 1);
  sc.model.x0_mean = Vector::Zero(1);
  sc.model.x0_cov = sigma0 * Matrix::Identity(1, 1);
  sc.suite.H = {Matrix::Identity(1, 1)};
  sc.suite.R = {Matrix::Identity(1, 1)};
  sc.net = SensorNetwork::from_edges(1, {});
  sc.pseudo = build_pseudo_model(sc.model, sc.suite);
  return sc;
}

struct PathScenario {
  FieldModel model;
  SensorSuite suite;
  SensorNetwork net;
  PseudoModel pseudo;
};

// Three agents on a path, M = 2, agents see components {0}, {1}, {0}.
PathScenario path_scenario() {
  PathScenario sc;
  Matrix a(2, 2);
  a << 0.95, 0.05, -0.05, 0.9;
  sc.model.A = a;
  sc.model.V = 0.01 * Matrix::Identity(2, 2);
  sc.model.x0_mean = Vector::Zero(2);
  sc.model.x0_cov = Matrix::Identity(2, 2);
  Matrix h0(1, 2), h1(1, 2);
  h0 << 1, 0;
  h1 << 0, 1;
  sc.suite.H = {h0, h1, h0};
  for (int n = 0; n < 3; ++n) sc.suite.R.push_back(0.25 * Matrix::Identity(1, 1));
  sc.net = SensorNetwork::from_edges(3, {{0, 1}, {1, 2}});
  sc.pseudo = build_pseudo_model(sc.model, sc.suite);
  return sc;
}

std::vector<AgentGains> zero_gains(const SensorNetwork& net, Eigen::Index m) {
  std::vector<AgentGains> gains(static_cast<size_t>(net.node_count()));
  for (int n = 0; n < net.node_count(); ++n) {
    auto& g = gains[static_cast<size_t>(n)];
    g.B_self = Matrix::Zero(m, m);
    g.K = Matrix::Zero(m, m);
    g.B_neighbor.assign(static_cast<size_t>(net.degree(n)), Matrix::Zero(m, m));
  }
  return gains;
}

// Scalar Kalman recursion on the pseudo observation z~ = g x + eta,
// Var(eta) = g: the oracle the single-agent schedules must reproduce.
std::vector<double> scalar_kf_posterior(double a, double v, double sigma0, double g,
                                        int horizon) {
  std::vector<double> out;
  double p = sigma0;
  for (int i = 0; i <= horizon; ++i) {
    const double post = g > 0.0 ? p / (g * p + 1.0) : p;
    out.push_back(post);
    p = a * a * post + v;
  }
  return out;
}

}  // namespace

TEST_CASE("init_joint_covariance block structure") {
  SUBCASE("zero initial covariance gives a zero joint covariance") {
    auto sc = scalar_scenario(1.0, 0.0, 0.0);
    const auto P = init_joint_covariance(sc.model, sc.pseudo, 1);
    CHECK(max_abs(P.P) == 0.0);
  }

  SUBCASE("scalar two-agent blocks") {
    // M=1, N=2, both agents H=1, R=4 => G_n = 0.25, G = 0.25.
    FieldModel model;
    model.A = Matrix::Identity(1, 1);
    model.V = Matrix::Zero(1, 1);
    model.x0_mean = Vector::Zero(1);
    const double sigma2 = 3.0;
    model.x0_cov = sigma2 * Matrix::Identity(1, 1);
    SensorSuite suite;
    suite.H = {Matrix::Identity(1, 1), Matrix::Identity(1, 1)};
    suite.R = {4.0 * Matrix::Identity(1, 1), 4.0 * Matrix::Identity(1, 1)};
    const auto pseudo = build_pseudo_model(model, suite);
    const double g = 0.25;
    const auto P = init_joint_covariance(model, pseudo, 2);
    for (int n = 0; n < 2; ++n) {
      for (int l = 0; l < 2; ++l) {
        CHECK(P.yy(n, l)(0, 0) == doctest::Approx(g * g * sigma2));
        CHECK(P.yx(n, l)(0, 0) == doctest::Approx(g * sigma2));
        CHECK(P.xx(n, l)(0, 0) == doctest::Approx(sigma2));
      }
    }
    double x_trace = 0.0;
    for (int n = 0; n < 2; ++n) x_trace += P.x_trace(n);
    CHECK(x_trace == doctest::Approx(2.0 * sigma2));
  }
}

TEST_CASE("filter_step_covariance with zero gains is the identity") {
  auto sc = path_scenario();
  auto P = init_joint_covariance(sc.model, sc.pseudo, 3);
  const auto after =
      filter_step_covariance(P, zero_gains(sc.net, 2), sc.pseudo, sc.net);
  CHECK(max_abs(after.P - P.P) <= 1e-12);
}

TEST_CASE("degenerate scalar case reproduces the one-stage Kalman update") {
  // N=1, M=1, H=R=1: prior variance p with fully correlated pseudo and field
  // errors. The two-stage update must land on the Kalman posterior
  // p - p^2/(p+1).
  const double p = 1.7;
  auto sc = scalar_scenario(1.0, 0.0, p);
  auto P = init_joint_covariance(sc.model, sc.pseudo, 1);

  const auto b = gauss_markov_B(P, 0, sc.pseudo, sc.net);
  CHECK(b.self(0, 0) == doctest::Approx(p / (p + 1.0)).epsilon(1e-12));

  std::vector<AgentGains> gains(1);
  gains[0].B_self = b.self;
  gains[0].B_neighbor = {};
  gains[0].K = Matrix::Zero(1, 1);

  const auto mid = y_stage_covariance(P, gains, sc.pseudo, sc.net);
  gains[0].K = gauss_markov_K(mid, 0, sc.pseudo);
  const auto post = x_stage_covariance(mid, gains, sc.pseudo);

  const double expect = p - p * p / (p + 1.0);
  CHECK(post.x_trace(0) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("pure consensus mixing contracts the y error iff beta is in range") {
  // Stub joint covariance: independent unit y errors, no information terms.
  auto sc = path_scenario();
  PseudoModel blind = sc.pseudo;
  for (auto& g : blind.G_local) g.setZero();
  for (auto& h : blind.H_tilde) h.setZero();
  for (auto& h : blind.H_check) h.setZero();

  JointCovariance P;
  P.agents = 3;
  P.field_dim = 2;
  P.P = Matrix::Zero(12, 12);
  P.P.topLeftCorner(6, 6) = Matrix::Identity(6, 6);

  const double lmax = sc.net.lambda_max();
  const auto mix = [&](double beta) {
    std::vector<AgentGains> gains = zero_gains(sc.net, 2);
    for (int n = 0; n < 3; ++n) {
      gains[static_cast<size_t>(n)].B_neighbor.assign(
          static_cast<size_t>(sc.net.degree(n)), beta * Matrix::Identity(2, 2));
    }
    const auto after = filter_step_covariance(P, gains, blind, sc.net);
    double total = 0.0;
    for (int n = 0; n < 3; ++n) total += after.y_trace(n);
    return total;
  };

  const double before = 6.0;
  CHECK(mix(0.5 / lmax) < before);
  CHECK(mix(1.9 / lmax) < before + 1e-9);
  // Far outside the stability bound the largest mode expands.
  CHECK(mix(2.5 / lmax) > before);
}

TEST_CASE("predict_step_covariance noise and propagation structure") {
  SUBCASE("noiseless identity dynamics with invertible G is the identity") {
    auto sc = path_scenario();
    sc.model.A = Matrix::Identity(2, 2);
    sc.model.V = Matrix::Zero(2, 2);
    sc.pseudo = build_pseudo_model(sc.model, sc.suite);
    auto P = init_joint_covariance(sc.model, sc.pseudo, 3);
    const auto next = predict_step_covariance(P, sc.model, sc.pseudo);
    CHECK(max_abs(next.P - P.P) <= 1e-10);
    CHECK(next.time_index == P.time_index + 1);
  }

  SUBCASE("common process noise fills every cross-agent block") {
    FieldModel model;
    model.A = Matrix::Identity(1, 1);
    model.V = Matrix::Identity(1, 1);
    model.x0_mean = Vector::Zero(1);
    model.x0_cov = Matrix::Zero(1, 1);
    SensorSuite suite;
    suite.H = {Matrix::Identity(1, 1), Matrix::Identity(1, 1)};
    suite.R = {Matrix::Identity(1, 1), Matrix::Identity(1, 1)};
    const auto pseudo = build_pseudo_model(model, suite);  // G = 1
    auto P = init_joint_covariance(model, pseudo, 2);      // zero
    const auto next = predict_step_covariance(P, model, pseudo);
    // Every entry of the 4x4 joint matrix is 1: [[GVG, GV], [VG, V]] per pair.
    CHECK(max_abs(next.P - Matrix::Ones(4, 4)) <= 1e-12);
  }

  SUBCASE("scalar half-decay dynamics from a zero prior") {
    auto sc = scalar_scenario(0.5, 1.0, 0.0);
    auto P = init_joint_covariance(sc.model, sc.pseudo, 1);
    const auto next = predict_step_covariance(P, sc.model, sc.pseudo);
    CHECK(max_abs(next.P - Matrix::Ones(2, 2)) <= 1e-12);
  }
}

TEST_CASE("gauss_markov_B handles singular residual covariance") {
  // Zero prior: nothing to gain, covariance of the residual is G_n only for
  // the innovation and zero for the consensus differences.
  auto sc = path_scenario();
  auto P = init_joint_covariance(sc.model, sc.pseudo, 3);
  P.P.setZero();
  const auto b = gauss_markov_B(P, 1, sc.pseudo, sc.net);
  CHECK(max_abs(b.self) <= 1e-12);
  for (const auto& bn : b.neighbor) CHECK(max_abs(bn) <= 1e-12);
}

TEST_CASE("gauss_markov_K direct cases") {
  SUBCASE("perfect pseudo-state knowledge inverts G") {
    // Post-y covariance with zero y error: K = 1/g, posterior 0.
    const double g = 0.25;
    const double p = 2.0;
    FieldModel model;
    model.A = Matrix::Identity(1, 1);
    model.V = Matrix::Zero(1, 1);
    model.x0_mean = Vector::Zero(1);
    model.x0_cov = Matrix::Zero(1, 1);
    SensorSuite suite;
    suite.H = {Matrix::Identity(1, 1)};
    suite.R = {(1.0 / g) * Matrix::Identity(1, 1)};
    const auto pseudo = build_pseudo_model(model, suite);
    JointCovariance P;
    P.agents = 1;
    P.field_dim = 1;
    P.P = Matrix::Zero(2, 2);
    P.P(1, 1) = p;
    const Matrix K = gauss_markov_K(P, 0, pseudo);
    CHECK(K(0, 0) == doctest::Approx(1.0 / g).epsilon(1e-10));
    std::vector<AgentGains> gains(1);
    gains[0].K = K;
    gains[0].B_self = Matrix::Zero(1, 1);
    const auto post = x_stage_covariance(P, gains, pseudo);
    CHECK(post.x_trace(0) <= 1e-12);
  }

  SUBCASE("zero residual covariance gives zero gain") {
    auto sc = scalar_scenario(1.0, 0.0, 0.0);
    const auto P = init_joint_covariance(sc.model, sc.pseudo, 1);
    CHECK(max_abs(gauss_markov_K(P, 0, sc.pseudo)) == 0.0);
  }

  SUBCASE("scalar arithmetic with uncorrelated filtered pseudo error") {
    // p = 1, g = 1, Var(e_y_filt) = 1, Cov(e_x, e_y_filt) = 0:
    // s = e_x - e_y_filt, Var(s) = 2, Cov(e_x, s) = 1, K = 1/2, posterior 1/2.
    auto sc = scalar_scenario(1.0, 0.0, 0.0);
    JointCovariance P;
    P.agents = 1;
    P.field_dim = 1;
    P.P = Matrix::Identity(2, 2);
    const Matrix K = gauss_markov_K(P, 0, sc.pseudo);
    CHECK(K(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    std::vector<AgentGains> gains(1);
    gains[0].K = K;
    gains[0].B_self = Matrix::Zero(1, 1);
    const auto post = x_stage_covariance(P, gains, sc.pseudo);
    CHECK(post.x_trace(0) == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("gain perturbations never reduce the posterior trace") {
  // Numerical optimality probe on a random two-agent scenario.
  std::mt19937_64 rng(314);
  FieldModel model;
  const Eigen::Index m = 2;
  model.A = test::random_matrix(rng, m, m, 0.4);
  model.V = test::random_psd(rng, m);
  model.x0_mean = Vector::Zero(m);
  model.x0_cov = test::random_spd(rng, m);
  SensorSuite suite;
  suite.H = {test::random_matrix(rng, 1, m), test::random_matrix(rng, 1, m)};
  suite.R = {test::random_spd(rng, 1), test::random_spd(rng, 1)};
  const auto net = SensorNetwork::from_edges(2, {{0, 1}});
  const auto pseudo = build_pseudo_model(model, suite);

  GainConfig cfg;
  cfg.horizon = 4;
  const auto sched = precompute_schedule(model, suite, net, pseudo, cfg);

  // Walk to the prediction-form covariance at the final round.
  auto P = init_joint_covariance(model, pseudo, 2);
  for (int i = 0; i < 4; ++i) {
    P = predict_step_covariance(
        filter_step_covariance(P, sched.steps[static_cast<size_t>(i)], pseudo, net),
        model, pseudo);
  }

  const int agent = 1;
  auto gains = sched.steps[4];
  const auto mid = y_stage_covariance(P, gains, pseudo, net);
  const double base_y = mid.y_trace(agent);
  const auto filt = x_stage_covariance(mid, gains, pseudo);
  const double base_x = filt.x_trace(agent);

  for (int probe = 0; probe < 100; ++probe) {
    auto perturbed = gains;
    auto& g = perturbed[agent];
    // +-1% relative perturbation of the stacked B gain.
    double norm2 = g.B_self.squaredNorm();
    for (const auto& b : g.B_neighbor) norm2 += b.squaredNorm();
    const double scale = 0.01 * std::sqrt(norm2);
    Matrix d_self = test::random_matrix(rng, m, m);
    std::vector<Matrix> d_nbr;
    double dn2 = d_self.squaredNorm();
    for (size_t j = 0; j < g.B_neighbor.size(); ++j) {
      d_nbr.push_back(test::random_matrix(rng, m, m));
      dn2 += d_nbr.back().squaredNorm();
    }
    const double dscale = scale / std::sqrt(dn2);
    g.B_self += dscale * d_self;
    for (size_t j = 0; j < g.B_neighbor.size(); ++j) {
      g.B_neighbor[j] += dscale * d_nbr[j];
    }
    const auto mid_p = y_stage_covariance(P, perturbed, pseudo, net);
    CHECK(mid_p.y_trace(agent) >= base_y - 1e-10);

    // +-1% perturbation of K, applied to the unperturbed post-y covariance.
    auto kgains = gains;
    Matrix dk = test::random_matrix(rng, m, m);
    kgains[agent].K += (0.01 * kgains[agent].K.norm() / dk.norm()) * dk;
    const auto filt_p = x_stage_covariance(mid, kgains, pseudo);
    CHECK(filt_p.x_trace(agent) >= base_x - 1e-10);
  }
}

TEST_CASE("precompute_schedule boundaries and symmetry") {
  SUBCASE("zero horizon yields one gain set") {
    auto sc = path_scenario();
    GainConfig cfg;
    cfg.horizon = 0;
    const auto sched = precompute_schedule(sc.model, sc.suite, sc.net, sc.pseudo, cfg);
    CHECK(sched.steps.size() == 1);
    CHECK(sched.predicted_mse.size() == 1);
    // The first update already reduces the prior uncertainty.
    double total = 0.0;
    for (double v : sched.predicted_mse[0]) total += v;
    CHECK(total < 3.0 * sc.model.x0_cov.trace());
    CHECK(total > 0.0);
  }

  SUBCASE("deterministic scenario keeps everything at zero") {
    auto sc = path_scenario();
    sc.model.V = Matrix::Zero(2, 2);
    sc.model.x0_cov = Matrix::Zero(2, 2);
    GainConfig cfg;
    cfg.horizon = 3;
    const auto sched = precompute_schedule(sc.model, sc.suite, sc.net, sc.pseudo, cfg);
    for (const auto& row : sched.predicted_mse) {
      for (double v : row) CHECK(v <= 1e-12);
    }
    for (const auto& step : sched.steps) {
      for (const auto& g : step) CHECK(max_abs(g.K) <= 1e-12);
    }
  }

  SUBCASE("identical agents on a vertex-transitive graph get identical gains") {
    FieldModel model;
    model.A = 0.9 * Matrix::Identity(2, 2);
    model.V = 0.05 * Matrix::Identity(2, 2);
    model.x0_mean = Vector::Zero(2);
    model.x0_cov = Matrix::Identity(2, 2);
    SensorSuite suite;
    Matrix h(1, 2);
    h << 1, 0.5;
    for (int n = 0; n < 4; ++n) {
      suite.H.push_back(h);
      suite.R.push_back(0.5 * Matrix::Identity(1, 1));
    }
    const auto net = SensorNetwork::from_edges(4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}});
    const auto pseudo = build_pseudo_model(model, suite);
    GainConfig cfg;
    cfg.horizon = 6;
    const auto sched = precompute_schedule(model, suite, net, pseudo, cfg);
    for (const auto& step : sched.steps) {
      for (int n = 1; n < 4; ++n) {
        CHECK(max_abs(step[static_cast<size_t>(n)].B_self - step[0].B_self) <= 1e-9);
        CHECK(max_abs(step[static_cast<size_t>(n)].K - step[0].K) <= 1e-9);
      }
    }
  }

  SUBCASE("disconnected network is rejected") {
    auto sc = path_scenario();
    const auto net = SensorNetwork::from_edges(3, {{0, 1}});
    GainConfig cfg;
    cfg.horizon = 1;
    CHECK_THROWS_WITH_AS(
        precompute_schedule(sc.model, sc.suite, net, sc.pseudo, cfg),
        doctest::Contains("disconnected"), std::runtime_error);
  }

  SUBCASE("static mode with beta out of range records warnings") {
    auto sc = path_scenario();
    GainConfig cfg;
    cfg.mode = GainMode::kStatic;
    cfg.horizon = 60;
    cfg.beta = 2.5 / sc.net.lambda_max();
    cfg.ceiling_factor = 1e30;  // let the instability run
    const auto sched = precompute_schedule(sc.model, sc.suite, sc.net, sc.pseudo, cfg);
    REQUIRE(!sched.warnings.empty());
    bool range_warning = false;
    bool contraction_warning = false;
    for (const auto& w : sched.warnings) {
      if (w.find("stability range") != std::string::npos) range_warning = true;
      if (w.find("not contracting") != std::string::npos) contraction_warning = true;
    }
    CHECK(range_warning);
    CHECK(contraction_warning);
  }
}

TEST_CASE("unbounded covariance triggers the ceiling error") {
  // Unstable field with static zero feedback: variance grows geometrically.
  auto sc = scalar_scenario(1.6, 1.0, 1.0);
  GainConfig cfg;
  cfg.horizon = 200;
  cfg.kappa = 0.0;
  cfg.alpha = 0.0;
  cfg.mode = GainMode::kStatic;
  cfg.ceiling_factor = 10.0;
  CHECK_THROWS_WITH_AS(precompute_schedule(sc.model, sc.suite, sc.net, sc.pseudo, cfg),
                       doctest::Contains("unbounded covariance"), std::runtime_error);
}

TEST_CASE("single-agent schedules reproduce the scalar Kalman recursion") {
  const double a = 0.8, v = 0.5, sigma0 = 2.0;
  auto sc = scalar_scenario(a, v, sigma0);
  const auto oracle = scalar_kf_posterior(a, v, sigma0, 1.0, 30);

  GainConfig cfg;
  cfg.horizon = 30;

  SUBCASE("joint recursion") {
    const auto sched = precompute_schedule(sc.model, sc.suite, sc.net, sc.pseudo, cfg);
    for (int i = 0; i <= 30; ++i) {
      CHECK(sched.predicted_mse[static_cast<size_t>(i)][0] ==
            doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-8));
    }
  }

  SUBCASE("measurement-consensus engine") {
    const auto sched = precompute_dikf_gains(sc.model, sc.suite, sc.net, sc.pseudo, cfg);
    for (int i = 0; i <= 30; ++i) {
      CHECK(sched.predicted_mse[static_cast<size_t>(i)][0] ==
            doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-8));
    }
  }

  SUBCASE("innovation-consensus engine") {
    const auto sched = precompute_pikf_gains(sc.model, sc.suite, sc.net, sc.pseudo, cfg);
    for (int i = 0; i <= 30; ++i) {
      CHECK(sched.predicted_mse[static_cast<size_t>(i)][0] ==
            doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-8));
      // K must match the scalar Kalman gain p/(p+1).
      const double p =
          i == 0 ? sigma0 : a * a * oracle[static_cast<size_t>(i - 1)] + v;
      CHECK(sched.K[static_cast<size_t>(i)][0](0, 0) ==
            doctest::Approx(p / (p + 1.0)).epsilon(1e-8));
    }
  }
}

TEST_CASE("schedule serialization round-trips bit-exactly") {
  auto sc = path_scenario();
  GainConfig cfg;
  cfg.horizon = 5;
  const auto sched = precompute_schedule(sc.model, sc.suite, sc.net, sc.pseudo, cfg);

  const std::string path =
      (std::filesystem::temp_directory_path() / "dkf_sched_test.bin").string();
  sched.save(path);
  const auto back = GainSchedule::load(path);
  std::filesystem::remove(path);

  CHECK(back.agents == sched.agents);
  CHECK(back.field_dim == sched.field_dim);
  CHECK(back.horizon == sched.horizon);
  CHECK(back.mode == sched.mode);
  CHECK(back.model_hash == sched.model_hash);
  REQUIRE(back.steps.size() == sched.steps.size());
  for (size_t i = 0; i < sched.steps.size(); ++i) {
    for (size_t n = 0; n < sched.steps[i].size(); ++n) {
      const auto& ga = sched.steps[i][n];
      const auto& gb = back.steps[i][n];
      REQUIRE(ga.B_neighbor.size() == gb.B_neighbor.size());
      CHECK(std::memcmp(ga.B_self.data(), gb.B_self.data(), sizeof(double) * 4) == 0);
      CHECK(std::memcmp(ga.K.data(), gb.K.data(), sizeof(double) * 4) == 0);
      for (size_t j = 0; j < ga.B_neighbor.size(); ++j) {
        CHECK(std::memcmp(ga.B_neighbor[j].data(), gb.B_neighbor[j].data(),
                          sizeof(double) * 4) == 0);
      }
    }
  }
  for (size_t i = 0; i < sched.predicted_mse.size(); ++i) {
    for (size_t n = 0; n < sched.predicted_mse[i].size(); ++n) {
      CHECK(sched.predicted_mse[i][n] == back.predicted_mse[i][n]);
    }
  }
}
