#include "dkf/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "dkf/hashing.hpp"

namespace dkf {

using nlohmann::json;

std::string estimator_name(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::kCkf: return "ckf";
    case EstimatorKind::kCikf: return "cikf";
    case EstimatorKind::kDikf: return "dikf";
    case EstimatorKind::kPikf: return "pikf";
  }
  return "?";
}

EstimatorKind parse_estimator(const std::string& name) {
  if (name == "ckf") return EstimatorKind::kCkf;
  if (name == "cikf") return EstimatorKind::kCikf;
  if (name == "dikf") return EstimatorKind::kDikf;
  if (name == "pikf") return EstimatorKind::kPikf;
  throw std::invalid_argument("unknown estimator: " + name);
}

bool ValidationReport::ok() const {
  for (const auto& issue : issues) {
    if (issue.severity == ValidationIssue::Severity::kFatal) return false;
  }
  return true;
}

std::vector<std::string> ValidationReport::fatal_messages() const {
  std::vector<std::string> out;
  for (const auto& issue : issues) {
    if (issue.severity == ValidationIssue::Severity::kFatal) out.push_back(issue.message);
  }
  return out;
}

std::vector<std::string> ValidationReport::warning_messages() const {
  std::vector<std::string> out;
  for (const auto& issue : issues) {
    if (issue.severity == ValidationIssue::Severity::kWarning) out.push_back(issue.message);
  }
  return out;
}

std::optional<double> mse_db(double mse) {
  if (!(mse > 0.0)) return std::nullopt;
  return 10.0 * std::log10(mse);
}

// ---------------------------------------------------------------------------
// Configuration parsing and scenario instantiation
// ---------------------------------------------------------------------------

namespace {

Matrix parse_matrix(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) {
    throw std::runtime_error(what + ": expected an array of rows");
  }
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw std::runtime_error(what + ": ragged rows");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = row[static_cast<size_t>(c)].get<double>();
    }
  }
  return m;
}

Vector parse_vector(const json& j, const std::string& what) {
  if (!j.is_array()) throw std::runtime_error(what + ": expected an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    v(i) = j[static_cast<size_t>(i)].get<double>();
  }
  return v;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

/// Square matrix from either an explicit array or {"scaled_identity": s}.
Matrix parse_square_spec(const json& j, Eigen::Index dim, const std::string& what) {
  if (j.is_object() && j.contains("scaled_identity")) {
    return j.at("scaled_identity").get<double>() * Matrix::Identity(dim, dim);
  }
  Matrix m = parse_matrix(j, what);
  if (m.rows() != dim || m.cols() != dim) {
    throw std::runtime_error(what + ": expected " + std::to_string(dim) + "x" +
                             std::to_string(dim));
  }
  return m;
}

Matrix random_orthogonal(Eigen::Index dim, RngStream& rng) {
  Matrix g(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) g(i, j) = rng.gaussian();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  // Fix the sign convention so the draw is unambiguous.
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < dim; ++j) {
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

SensorNetwork instantiate_graph(const json& g, int agents, std::uint64_t seed) {
  const std::string kind = g.at("kind").get<std::string>();
  if (kind == "explicit") {
    std::vector<std::pair<int, int>> edges;
    for (const auto& e : g.at("edges")) {
      edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    }
    return SensorNetwork::from_edges(agents, edges);
  }
  GraphParams params;
  if (g.contains("p")) params.edge_probability = g.at("p").get<double>();
  if (g.contains("radius")) params.radius = g.at("radius").get<double>();
  if (g.contains("max_retries")) params.max_retries = g.at("max_retries").get<int>();
  RngStream rng(seed, 0, Purpose::kGraph);
  return generate_network(parse_graph_kind(kind), agents, params, rng);
}

FieldModel instantiate_field(const json& f, Eigen::Index dim, std::uint64_t seed) {
  FieldModel model;
  const json& a = f.at("A");
  if (a.is_object() && a.contains("random_stable")) {
    RngStream rng(seed, 0, Purpose::kField);
    model.A = a.at("random_stable").get<double>() * random_orthogonal(dim, rng);
  } else if (a.is_object() && a.contains("scaled_identity")) {
    model.A = a.at("scaled_identity").get<double>() * Matrix::Identity(dim, dim);
  } else {
    model.A = parse_matrix(a, "field.A");
    if (model.A.rows() != dim || model.A.cols() != dim) {
      throw std::runtime_error("field.A: dimension mismatch");
    }
  }
  model.V = parse_square_spec(f.at("V"), dim, "field.V");
  model.x0_mean = f.contains("x0_mean") ? parse_vector(f.at("x0_mean"), "field.x0_mean")
                                        : Vector::Zero(dim);
  model.x0_cov = parse_square_spec(f.at("x0_cov"), dim, "field.x0_cov");
  model.validate();
  return model;
}

SensorSuite instantiate_sensors(const json& s, int agents, Eigen::Index dim,
                                std::uint64_t seed) {
  SensorSuite suite;
  if (s.contains("explicit")) {
    for (const auto& entry : s.at("explicit")) {
      suite.H.push_back(parse_matrix(entry.at("H"), "sensors.H"));
      suite.R.push_back(parse_matrix(entry.at("R"), "sensors.R"));
    }
    if (suite.agent_count() != agents) {
      throw std::runtime_error("sensors: explicit list must have one entry per agent");
    }
    suite.validate(dim);
    return suite;
  }

  const json& rs = s.at("random_sparse");
  const int k = rs.at("components_per_agent").get<int>();
  const double noise_var = rs.at("noise_var").get<double>();
  if (k < 1 || static_cast<Eigen::Index>(k) > dim) {
    throw std::runtime_error("sensors.random_sparse: components_per_agent out of range");
  }
  if (noise_var <= 0.0) {
    throw std::runtime_error("sensors.random_sparse: noise_var must be positive");
  }

  // Deal components by cycling through all of them so that N*k >= M implies
  // every component is observed by someone; re-shuffle if an agent drew the
  // same component twice.
  RngStream rng(seed, 0, Purpose::kSensors);
  const int total = agents * k;
  std::vector<int> slots(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) {
    slots[static_cast<size_t>(i)] = i % static_cast<int>(dim);
  }
  std::vector<std::vector<int>> assignment;
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::shuffle(slots.begin(), slots.end(), rng.engine());
    assignment.clear();
    bool valid = true;
    for (int n = 0; n < agents && valid; ++n) {
      std::vector<int> comps(slots.begin() + n * k, slots.begin() + (n + 1) * k);
      std::sort(comps.begin(), comps.end());
      valid = std::adjacent_find(comps.begin(), comps.end()) == comps.end();
      assignment.push_back(std::move(comps));
    }
    if (valid) break;
    assignment.clear();
  }
  if (assignment.empty()) {
    throw std::runtime_error("sensors.random_sparse: could not deal distinct components");
  }

  for (int n = 0; n < agents; ++n) {
    Matrix h = Matrix::Zero(k, dim);
    for (int j = 0; j < k; ++j) {
      h(j, assignment[static_cast<size_t>(n)][static_cast<size_t>(j)]) = 1.0;
    }
    suite.H.push_back(std::move(h));
    suite.R.push_back(noise_var * Matrix::Identity(k, k));
  }
  suite.validate(dim);
  return suite;
}

GainConfig parse_gain_config(const json& j, int horizon, double ceiling_factor) {
  GainConfig cfg;
  cfg.horizon = horizon;
  cfg.ceiling_factor = ceiling_factor;
  if (j.is_null()) return cfg;
  if (j.contains("mode")) {
    const std::string mode = j.at("mode").get<std::string>();
    if (mode == "optimal") {
      cfg.mode = GainMode::kOptimal;
    } else if (mode == "static") {
      cfg.mode = GainMode::kStatic;
    } else {
      throw std::runtime_error("gains.mode must be 'optimal' or 'static'");
    }
  }
  if (j.contains("alpha")) cfg.alpha = j.at("alpha").get<double>();
  if (j.contains("beta") && !j.at("beta").is_null()) cfg.beta = j.at("beta").get<double>();
  if (j.contains("kappa")) cfg.kappa = j.at("kappa").get<double>();
  return cfg;
}

int observability_rank(const FieldModel& model, const SensorSuite& suite) {
  const Eigen::Index m = model.dim();
  Eigen::Index rows = 0;
  for (int n = 0; n < suite.agent_count(); ++n) rows += suite.obs_dim(n);
  Matrix stacked(rows, m);
  Eigen::Index row = 0;
  for (int n = 0; n < suite.agent_count(); ++n) {
    stacked.block(row, 0, suite.obs_dim(n), m) = suite.H[static_cast<size_t>(n)];
    row += suite.obs_dim(n);
  }
  Matrix obs(rows * m, m);
  Matrix power = Matrix::Identity(m, m);
  for (Eigen::Index p = 0; p < m; ++p) {
    obs.block(p * rows, 0, rows, m) = stacked * power;
    power = power * model.A;
  }
  Eigen::BDCSVD<Matrix> svd(obs);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) <= 0.0) return 0;
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > 1e-10 * sv(0)) ++rank;
  }
  return rank;
}

}  // namespace

LoadResult load_scenario_json(const json& config) {
  LoadResult out;
  auto fatal = [&out](const std::string& msg) {
    out.report.issues.push_back({ValidationIssue::Severity::kFatal, msg});
  };
  auto warn = [&out](const std::string& msg) {
    out.report.issues.push_back({ValidationIssue::Severity::kWarning, msg});
  };
  auto info = [&out](const std::string& msg) {
    out.report.issues.push_back({ValidationIssue::Severity::kInfo, msg});
  };

  Scenario sc;
  try {
    sc.name = config.value("name", std::string("scenario"));
    sc.seed = config.at("seed").get<std::uint64_t>();
    sc.trials = config.value("trials", 1);
    sc.horizon = config.at("horizon").get<int>();
    const int agents = config.at("agents").get<int>();
    const int field_dim = config.at("field_dim").get<int>();
    if (agents < 1) fatal("agents must be >= 1");
    if (field_dim < 1) fatal("field_dim must be >= 1");
    if (sc.trials < 1) fatal("trials must be >= 1");
    if (sc.horizon < 0) fatal("horizon must be >= 0");
    if (!out.report.ok()) return out;

    // Estimators (an empty list is allowed; the run then only reports).
    if (config.contains("estimators")) {
      for (const auto& e : config.at("estimators")) {
        sc.estimators.push_back(parse_estimator(e.get<std::string>()));
      }
    }

    // Record times.
    if (config.contains("record_times")) {
      for (const auto& t : config.at("record_times")) {
        sc.record_times.push_back(t.get<int>());
      }
    } else {
      const int every = config.value("record_every", 10);
      if (every < 1) {
        fatal("record_every must be >= 1");
        return out;
      }
      for (int t = 0; t <= sc.horizon; t += every) sc.record_times.push_back(t);
    }
    if (std::find(sc.record_times.begin(), sc.record_times.end(), sc.horizon) ==
        sc.record_times.end()) {
      sc.record_times.push_back(sc.horizon);
    }
    std::sort(sc.record_times.begin(), sc.record_times.end());
    sc.record_times.erase(
        std::unique(sc.record_times.begin(), sc.record_times.end()),
        sc.record_times.end());
    for (int t : sc.record_times) {
      if (t < 0 || t > sc.horizon) {
        fatal("record time " + std::to_string(t) + " outside [0, horizon]");
        return out;
      }
    }

    const double ceiling_factor = config.value("ceiling_factor", 1e6);

    try {
      sc.network = instantiate_graph(config.at("graph"), agents, sc.seed);
    } catch (const std::exception& e) {
      fatal(std::string("graph: ") + e.what());
      return out;
    }
    if (!sc.network.connected()) {
      std::ostringstream msg;
      msg << "graph not connected (lambda2=" << sc.network.algebraic_connectivity()
          << ")";
      fatal(msg.str());
      return out;
    }

    try {
      sc.model = instantiate_field(config.at("field"), field_dim, sc.seed);
    } catch (const std::exception& e) {
      fatal(std::string("field: ") + e.what());
      return out;
    }
    try {
      sc.suite = instantiate_sensors(config.at("sensors"), agents, field_dim, sc.seed);
    } catch (const std::exception& e) {
      fatal(std::string("sensors: ") + e.what());
      return out;
    }

    try {
      sc.pseudo = build_pseudo_model(sc.model, sc.suite);
    } catch (const std::exception& e) {
      fatal(std::string("pseudo model: ") + e.what());
      return out;
    }
    if (!sc.pseudo.g_invertible) {
      warn("field not instantaneously globally observable (averaged information "
           "matrix singular)");
    }
    out.report.observability_rank = observability_rank(sc.model, sc.suite);
    info("observability rank over one field period: " +
         std::to_string(out.report.observability_rank) + " of " +
         std::to_string(field_dim));

    const json gains = config.value("gains", json::object());
    for (const auto& [key, value] : gains.items()) {
      parse_estimator(key);  // throws on unknown keys
      (void)value;
    }
    for (EstimatorKind kind : {EstimatorKind::kCkf, EstimatorKind::kCikf,
                               EstimatorKind::kDikf, EstimatorKind::kPikf}) {
      const std::string key = estimator_name(kind);
      GainConfig cfg = parse_gain_config(gains.contains(key) ? gains.at(key) : json(),
                                         sc.horizon, ceiling_factor);
      // Resolve the automatic consensus weight now so the echoed config is
      // fully explicit.
      cfg.beta = resolve_beta(cfg, sc.network);
      sc.gain_configs[kind] = cfg;
    }

    // Consensus stability warnings for the estimators that mix with beta.
    const double lmax = sc.network.lambda_max();
    if (lmax > 0.0) {
      const double bound = 2.0 / lmax;
      for (EstimatorKind kind : sc.estimators) {
        const GainConfig& cfg = sc.gain_configs[kind];
        const bool uses_beta =
            kind == EstimatorKind::kDikf || kind == EstimatorKind::kPikf ||
            (kind == EstimatorKind::kCikf && cfg.mode == GainMode::kStatic);
        if (uses_beta && (cfg.beta <= 0.0 || cfg.beta >= bound)) {
          std::ostringstream msg;
          msg << estimator_name(kind) << ": consensus weight beta=" << cfg.beta
              << " outside stability range (0, " << bound << ")";
          warn(msg.str());
        }
      }
    }
  } catch (const std::exception& e) {
    fatal(std::string("config: ") + e.what());
    return out;
  }

  if (!out.report.ok()) return out;

  // Normative resolved configuration.
  json resolved;
  resolved["name"] = sc.name;
  resolved["seed"] = sc.seed;
  resolved["agents"] = sc.network.node_count();
  resolved["field_dim"] = static_cast<int>(sc.model.dim());
  json edges = json::array();
  for (auto [u, v] : sc.network.edges()) edges.push_back(json::array({u, v}));
  resolved["graph"] = {{"kind", "explicit"}, {"edges", std::move(edges)}};
  resolved["field"] = {{"A", matrix_to_json(sc.model.A)},
                       {"V", matrix_to_json(sc.model.V)},
                       {"x0_mean", vector_to_json(sc.model.x0_mean)},
                       {"x0_cov", matrix_to_json(sc.model.x0_cov)}};
  json sensors = json::array();
  for (int n = 0; n < sc.suite.agent_count(); ++n) {
    sensors.push_back({{"H", matrix_to_json(sc.suite.H[static_cast<size_t>(n)])},
                       {"R", matrix_to_json(sc.suite.R[static_cast<size_t>(n)])}});
  }
  resolved["sensors"] = {{"explicit", std::move(sensors)}};
  resolved["horizon"] = sc.horizon;
  resolved["trials"] = sc.trials;
  json est_list = json::array();
  for (EstimatorKind kind : sc.estimators) est_list.push_back(estimator_name(kind));
  resolved["estimators"] = std::move(est_list);
  json gains_out;
  for (const auto& [kind, cfg] : sc.gain_configs) {
    gains_out[estimator_name(kind)] = {
        {"mode", cfg.mode == GainMode::kOptimal ? "optimal" : "static"},
        {"alpha", cfg.alpha},
        {"beta", cfg.beta},
        {"kappa", cfg.kappa}};
  }
  resolved["gains"] = std::move(gains_out);
  resolved["record_times"] = sc.record_times;
  resolved["ceiling_factor"] = sc.gain_configs[EstimatorKind::kCikf].ceiling_factor;

  sc.resolved_config = resolved.dump(2);
  Fnv1a h;
  h.text(sc.resolved_config);
  sc.config_hash = h.value();

  out.scenario = std::move(sc);
  return out;
}

LoadResult load_scenario_text(const std::string& json_text) {
  json parsed;
  try {
    parsed = json::parse(json_text);
  } catch (const std::exception& e) {
    LoadResult out;
    out.report.issues.push_back(
        {ValidationIssue::Severity::kFatal, std::string("config parse: ") + e.what()});
    return out;
  }
  return load_scenario_json(parsed);
}

LoadResult load_scenario_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) {
    LoadResult out;
    out.report.issues.push_back(
        {ValidationIssue::Severity::kFatal, "cannot open config file: " + path});
    return out;
  }
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return load_scenario_text(buffer.str());
}

// ---------------------------------------------------------------------------
// Monte-Carlo run
// ---------------------------------------------------------------------------

namespace {

struct Cell {
  double sum_sq = 0.0;
  double sum_sq2 = 0.0;
  Vector sum_err;
  Vector sum_err2;
};

struct ChunkAccum {
  // cells[est][time][agent]
  std::vector<std::vector<std::vector<Cell>>> cells;
  // avg_sum[est][time]: per-trial network-average squared error sums
  std::vector<std::vector<double>> avg_sum;
  std::vector<std::vector<double>> avg_sum2;
  std::vector<double> gap_sum;
  std::vector<double> gap_sum2;
  bool pairing_ok = true;
  int trials = 0;
};

std::uint64_t hash_observations(const Trajectory& traj) {
  Fnv1a h;
  for (const auto& per_agent : traj.observations) {
    for (const auto& z : per_agent) h.vector(z);
  }
  return h.value();
}

// Record-time lookup: record_index[i] >= 0 iff time i is recorded.
std::vector<int> build_record_index(const std::vector<int>& record_times, int horizon) {
  std::vector<int> idx(static_cast<size_t>(horizon) + 1, -1);
  for (size_t k = 0; k < record_times.size(); ++k) {
    idx[static_cast<size_t>(record_times[k])] = static_cast<int>(k);
  }
  return idx;
}

struct TrialRecorder {
  ChunkAccum* accum = nullptr;
  const Trajectory* traj = nullptr;
  const std::vector<int>* record_index = nullptr;
  int est_index = 0;
  int agents = 0;
  int final_record = 0;
  double final_avg = 0.0;  // network-average squared error at the last record

  void record(int time, const std::vector<Vector>& x_filt_per_agent) {
    const int t = (*record_index)[static_cast<size_t>(time)];
    if (t < 0) return;
    const Vector& truth = traj->states[static_cast<size_t>(time)];
    double avg = 0.0;
    auto& row = accum->cells[static_cast<size_t>(est_index)][static_cast<size_t>(t)];
    for (int n = 0; n < agents; ++n) {
      const Vector err = truth - x_filt_per_agent[static_cast<size_t>(n)];
      const double sq = err.squaredNorm();
      Cell& cell = row[static_cast<size_t>(n)];
      cell.sum_sq += sq;
      cell.sum_sq2 += sq * sq;
      cell.sum_err += err;
      cell.sum_err2 += err.cwiseProduct(err);
      avg += sq;
    }
    avg /= static_cast<double>(agents);
    accum->avg_sum[static_cast<size_t>(est_index)][static_cast<size_t>(t)] += avg;
    accum->avg_sum2[static_cast<size_t>(est_index)][static_cast<size_t>(t)] += avg * avg;
    if (t == final_record) final_avg = avg;
  }
};

struct Precomputed {
  std::optional<GainSchedule> cikf;
  const GainSchedule* cikf_ptr = nullptr;
  std::optional<ConsensusGainSchedule> dikf;
  std::optional<ConsensusGainSchedule> pikf;
  std::optional<CkfTrajectory> ckf;
};

}  // namespace

RunReport run_scenario(const Scenario& scenario, const RunOptions& options) {
  const int agents = scenario.network.node_count();
  const int horizon = scenario.horizon;
  const int trials = scenario.trials;
  const Eigen::Index m = scenario.model.dim();

  RunReport report;
  report.scenario_name = scenario.name;
  report.config_hash = scenario.config_hash;
  report.agents = agents;
  report.horizon = horizon;
  report.trials = trials;
  report.record_times = scenario.record_times;
  report.estimators = scenario.estimators;
  report.resolved_config = scenario.resolved_config;

  const auto has = [&](EstimatorKind kind) {
    return std::find(scenario.estimators.begin(), scenario.estimators.end(), kind) !=
           scenario.estimators.end();
  };

  // --- Precompute gain schedules (data independent) ---
  const auto t0 = std::chrono::steady_clock::now();
  Precomputed pre;
  if (has(EstimatorKind::kCikf)) {
    const GainConfig& cfg = scenario.gain_configs.at(EstimatorKind::kCikf);
    if (options.preloaded_schedule != nullptr) {
      const GainSchedule& s = *options.preloaded_schedule;
      if (s.model_hash != scenario_hash(scenario.model, scenario.suite, scenario.network)) {
        throw std::invalid_argument("preloaded schedule does not match scenario model");
      }
      if (s.agents != agents || s.field_dim != m) {
        throw std::invalid_argument("preloaded schedule dimension mismatch");
      }
      if (s.mode != cfg.mode) {
        throw std::invalid_argument("preloaded schedule gain mode mismatch");
      }
      pre.cikf_ptr = &s;
    } else {
      pre.cikf = precompute_schedule(scenario.model, scenario.suite, scenario.network,
                                     scenario.pseudo, cfg);
      pre.cikf_ptr = &*pre.cikf;
    }
    if (pre.cikf_ptr->horizon < horizon) {
      report.warnings.push_back("gain schedule shorter than horizon; final gains reused");
    }
    report.max_psd_clip = std::max(report.max_psd_clip, pre.cikf_ptr->max_psd_clip);
    for (const auto& w : pre.cikf_ptr->warnings) {
      report.warnings.push_back("cikf gains: " + w);
    }
  }
  if (has(EstimatorKind::kDikf)) {
    pre.dikf = precompute_dikf_gains(scenario.model, scenario.suite, scenario.network,
                                     scenario.pseudo,
                                     scenario.gain_configs.at(EstimatorKind::kDikf));
    for (const auto& w : pre.dikf->warnings) report.warnings.push_back("dikf gains: " + w);
  }
  if (has(EstimatorKind::kPikf)) {
    pre.pikf = precompute_pikf_gains(scenario.model, scenario.suite, scenario.network,
                                     scenario.pseudo,
                                     scenario.gain_configs.at(EstimatorKind::kPikf));
    for (const auto& w : pre.pikf->warnings) report.warnings.push_back("pikf gains: " + w);
  }
  if (has(EstimatorKind::kCkf)) {
    pre.ckf = ckf_covariance_trajectory(scenario.model, scenario.suite, horizon);
  }
  report.precompute_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // Reconstruction provenance: the measurement/innovation consensus
  // recursions are reconstructions, the consensus+innovations filter and the
  // centralized baseline are not.
  for (EstimatorKind kind : scenario.estimators) {
    report.reconstructed[kind] =
        kind == EstimatorKind::kDikf || kind == EstimatorKind::kPikf;
  }

  const int est_count = static_cast<int>(scenario.estimators.size());
  const int time_count = static_cast<int>(scenario.record_times.size());
  const auto record_index = build_record_index(scenario.record_times, horizon);
  const int final_record = time_count - 1;

  // Expected-performance chain for paired final-time gaps.
  std::vector<std::pair<int, int>> gap_pairs;  // indices into scenario.estimators
  {
    std::vector<int> chain;
    for (EstimatorKind kind : {EstimatorKind::kCkf, EstimatorKind::kCikf,
                               EstimatorKind::kDikf, EstimatorKind::kPikf}) {
      auto it = std::find(scenario.estimators.begin(), scenario.estimators.end(), kind);
      if (it != scenario.estimators.end()) {
        chain.push_back(static_cast<int>(it - scenario.estimators.begin()));
      }
    }
    for (size_t k = 0; k + 1 < chain.size(); ++k) {
      gap_pairs.emplace_back(chain[k], chain[k + 1]);
    }
  }

  // --- Monte Carlo over trials, chunked for deterministic reduction ---
  const auto t1 = std::chrono::steady_clock::now();
  constexpr int kChunk = 64;
  const int chunk_count = (trials + kChunk - 1) / kChunk;
  std::vector<ChunkAccum> chunks(static_cast<size_t>(chunk_count));

  const auto make_accum = [&](ChunkAccum& acc) {
    acc.cells.resize(static_cast<size_t>(est_count));
    acc.avg_sum.assign(static_cast<size_t>(est_count),
                       std::vector<double>(static_cast<size_t>(time_count), 0.0));
    acc.avg_sum2 = acc.avg_sum;
    for (auto& per_time : acc.cells) {
      per_time.resize(static_cast<size_t>(time_count));
      for (auto& per_agent : per_time) {
        per_agent.resize(static_cast<size_t>(agents));
        for (auto& cell : per_agent) {
          cell.sum_err = Vector::Zero(m);
          cell.sum_err2 = Vector::Zero(m);
        }
      }
    }
    acc.gap_sum.assign(gap_pairs.size(), 0.0);
    acc.gap_sum2.assign(gap_pairs.size(), 0.0);
  };

  const auto run_trial = [&](ChunkAccum& acc, int trial) {
    const Trajectory traj = simulate_truth(scenario.model, scenario.suite, horizon,
                                           scenario.seed,
                                           static_cast<std::uint64_t>(trial));
    const std::uint64_t expected_hash = hash_observations(traj);

    std::vector<double> final_avgs(static_cast<size_t>(est_count), 0.0);
    std::vector<Vector> filt(static_cast<size_t>(agents));

    for (int e = 0; e < est_count; ++e) {
      const EstimatorKind kind = scenario.estimators[static_cast<size_t>(e)];
      TrialRecorder rec{&acc, &traj, &record_index, e, agents, final_record, 0.0};
      Fnv1a obs_hash;

      switch (kind) {
        case EstimatorKind::kCkf: {
          const CkfTrajectory& ct = *pre.ckf;
          Vector x = scenario.model.x0_mean;
          for (int i = 0; i <= horizon; ++i) {
            const auto& obs = traj.observations[static_cast<size_t>(i)];
            for (const auto& z : obs) obs_hash.vector(z);
            const Vector z = stack_observations(obs);
            const Vector x_filt =
                x + ct.K[static_cast<size_t>(i)] * (z - ct.H * x);
            for (int n = 0; n < agents; ++n) filt[static_cast<size_t>(n)] = x_filt;
            rec.record(i, filt);
            x = scenario.model.A * x_filt;
          }
          break;
        }
        case EstimatorKind::kCikf: {
          auto states = init_cikf_states(scenario.model, scenario.pseudo, agents);
          RoundMailbox mb = cikf_initial_mailbox(states, scenario.network);
          for (int i = 0; i <= horizon; ++i) {
            const auto& obs = traj.observations[static_cast<size_t>(i)];
            for (const auto& z : obs) obs_hash.vector(z);
            mb = cikf_round(states, mb, *pre.cikf_ptr, scenario.model,
                            scenario.pseudo, scenario.network, obs);
            for (int n = 0; n < agents; ++n) {
              filt[static_cast<size_t>(n)] = states[static_cast<size_t>(n)].x_filt;
            }
            rec.record(i, filt);
          }
          break;
        }
        case EstimatorKind::kDikf:
        case EstimatorKind::kPikf: {
          const ConsensusGainSchedule& gains =
              kind == EstimatorKind::kDikf ? *pre.dikf : *pre.pikf;
          auto states = init_consensus_states(scenario.model, agents);
          RoundMailbox mb = empty_mailbox(scenario.network);
          for (int i = 0; i <= horizon; ++i) {
            const auto& obs = traj.observations[static_cast<size_t>(i)];
            for (const auto& z : obs) obs_hash.vector(z);
            mb = kind == EstimatorKind::kDikf
                     ? dikf_round(states, mb, gains, scenario.model, scenario.pseudo,
                                  scenario.network, obs)
                     : pikf_round(states, mb, gains, scenario.model, scenario.pseudo,
                                  scenario.network, obs);
            for (int n = 0; n < agents; ++n) {
              filt[static_cast<size_t>(n)] = states[static_cast<size_t>(n)].x_filt;
            }
            rec.record(i, filt);
          }
          break;
        }
      }

      if (obs_hash.value() != expected_hash) acc.pairing_ok = false;
      final_avgs[static_cast<size_t>(e)] = rec.final_avg;
    }

    for (size_t p = 0; p < gap_pairs.size(); ++p) {
      const double gap = final_avgs[static_cast<size_t>(gap_pairs[p].second)] -
                         final_avgs[static_cast<size_t>(gap_pairs[p].first)];
      acc.gap_sum[p] += gap;
      acc.gap_sum2[p] += gap * gap;
    }
    ++acc.trials;
  };

  std::atomic<int> next_chunk{0};
  const auto worker = [&]() {
    while (true) {
      const int c = next_chunk.fetch_add(1);
      if (c >= chunk_count) break;
      ChunkAccum& acc = chunks[static_cast<size_t>(c)];
      make_accum(acc);
      const int begin = c * kChunk;
      const int end = std::min(trials, begin + kChunk);
      for (int trial = begin; trial < end; ++trial) run_trial(acc, trial);
    }
  };

  int thread_count = options.threads > 0
                         ? options.threads
                         : static_cast<int>(std::thread::hardware_concurrency());
  thread_count = std::max(1, std::min(thread_count, chunk_count));
  if (thread_count == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(thread_count));
    for (int w = 0; w < thread_count; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // --- Deterministic reduction in chunk order ---
  ChunkAccum total;
  make_accum(total);
  for (const auto& chunk : chunks) {
    total.pairing_ok = total.pairing_ok && chunk.pairing_ok;
    total.trials += chunk.trials;
    for (int e = 0; e < est_count; ++e) {
      for (int t = 0; t < time_count; ++t) {
        total.avg_sum[static_cast<size_t>(e)][static_cast<size_t>(t)] +=
            chunk.avg_sum[static_cast<size_t>(e)][static_cast<size_t>(t)];
        total.avg_sum2[static_cast<size_t>(e)][static_cast<size_t>(t)] +=
            chunk.avg_sum2[static_cast<size_t>(e)][static_cast<size_t>(t)];
        for (int n = 0; n < agents; ++n) {
          Cell& dst = total.cells[static_cast<size_t>(e)][static_cast<size_t>(t)]
                                [static_cast<size_t>(n)];
          const Cell& src = chunk.cells[static_cast<size_t>(e)][static_cast<size_t>(t)]
                                       [static_cast<size_t>(n)];
          dst.sum_sq += src.sum_sq;
          dst.sum_sq2 += src.sum_sq2;
          dst.sum_err += src.sum_err;
          dst.sum_err2 += src.sum_err2;
        }
      }
    }
    for (size_t p = 0; p < gap_pairs.size(); ++p) {
      total.gap_sum[p] += chunk.gap_sum[p];
      total.gap_sum2[p] += chunk.gap_sum2[p];
    }
  }
  report.pairing_ok = total.pairing_ok;

  const double nt = static_cast<double>(trials);
  for (int e = 0; e < est_count; ++e) {
    const EstimatorKind kind = scenario.estimators[static_cast<size_t>(e)];
    MetricSeries series;
    series.mse.resize(static_cast<size_t>(time_count));
    series.mse_stderr.resize(static_cast<size_t>(time_count));
    series.bias.resize(static_cast<size_t>(time_count));
    series.bias_stderr.resize(static_cast<size_t>(time_count));
    for (int t = 0; t < time_count; ++t) {
      auto& mse_row = series.mse[static_cast<size_t>(t)];
      auto& se_row = series.mse_stderr[static_cast<size_t>(t)];
      auto& bias_row = series.bias[static_cast<size_t>(t)];
      auto& bse_row = series.bias_stderr[static_cast<size_t>(t)];
      for (int n = 0; n < agents; ++n) {
        const Cell& cell = total.cells[static_cast<size_t>(e)][static_cast<size_t>(t)]
                                      [static_cast<size_t>(n)];
        const double mean = cell.sum_sq / nt;
        const double var = std::max(0.0, cell.sum_sq2 / nt - mean * mean);
        mse_row.push_back(mean);
        se_row.push_back(std::sqrt(var / nt));
        const Vector b = cell.sum_err / nt;
        Vector bse(m);
        for (Eigen::Index c = 0; c < m; ++c) {
          const double v = std::max(0.0, cell.sum_err2(c) / nt - b(c) * b(c));
          bse(c) = std::sqrt(v / nt);
        }
        bias_row.push_back(b);
        bse_row.push_back(bse);
      }
      const double avg_mean =
          total.avg_sum[static_cast<size_t>(e)][static_cast<size_t>(t)] / nt;
      const double avg_var = std::max(
          0.0, total.avg_sum2[static_cast<size_t>(e)][static_cast<size_t>(t)] / nt -
                   avg_mean * avg_mean);
      series.avg_mse.push_back(avg_mean);
      series.avg_mse_stderr.push_back(std::sqrt(avg_var / nt));
    }

    // Predicted curves from the covariance recursions.
    for (int t : scenario.record_times) {
      double predicted = -1.0;
      switch (kind) {
        case EstimatorKind::kCkf:
          predicted = pre.ckf->P_filt[static_cast<size_t>(t)].trace();
          break;
        case EstimatorKind::kCikf: {
          const auto& mse = pre.cikf_ptr->predicted_mse;
          const size_t tt = std::min<size_t>(static_cast<size_t>(t), mse.size() - 1);
          double sum = 0.0;
          for (double v : mse[tt]) sum += v;
          predicted = sum / static_cast<double>(agents);
          break;
        }
        case EstimatorKind::kDikf:
        case EstimatorKind::kPikf: {
          const auto& mse = kind == EstimatorKind::kDikf ? pre.dikf->predicted_mse
                                                         : pre.pikf->predicted_mse;
          const size_t tt = std::min<size_t>(static_cast<size_t>(t), mse.size() - 1);
          double sum = 0.0;
          for (double v : mse[tt]) sum += v;
          predicted = sum / static_cast<double>(agents);
          break;
        }
      }
      series.predicted_avg_mse.push_back(predicted);
    }
    report.metrics[kind] = std::move(series);
  }

  for (size_t p = 0; p < gap_pairs.size(); ++p) {
    PairedGap gap;
    gap.lower = scenario.estimators[static_cast<size_t>(gap_pairs[p].first)];
    gap.higher = scenario.estimators[static_cast<size_t>(gap_pairs[p].second)];
    gap.mean = total.gap_sum[p] / nt;
    const double var = std::max(0.0, total.gap_sum2[p] / nt - gap.mean * gap.mean);
    gap.stderr_ = std::sqrt(var / nt);
    report.final_gaps.push_back(gap);
  }

  report.simulate_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  return report;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

namespace {

std::string format_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_db(double mse) {
  const auto db = mse_db(mse);
  if (!db) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4f", *db);
  return buf;
}

}  // namespace

void write_mse_csv(std::ostream& os, const RunReport& report,
                   const std::string& scenario_column, bool with_header) {
  const bool with_scenario = !scenario_column.empty();
  if (with_header) {
    os << (with_scenario ? "scenario,time,estimator,agent,mse,mse_db,stderr\n"
                         : "time,estimator,agent,mse,mse_db,stderr\n");
  }
  const auto prefix = [&]() -> std::string {
    return with_scenario ? scenario_column + "," : "";
  };
  for (EstimatorKind kind : report.estimators) {
    const MetricSeries& series = report.metrics.at(kind);
    const std::string name = estimator_name(kind);
    for (size_t t = 0; t < report.record_times.size(); ++t) {
      const int time = report.record_times[t];
      for (int n = 0; n < report.agents; ++n) {
        const double mse = series.mse[t][static_cast<size_t>(n)];
        os << prefix() << time << "," << name << "," << n << ","
           << format_full(mse) << "," << format_db(mse) << ","
           << format_full(series.mse_stderr[t][static_cast<size_t>(n)]) << "\n";
      }
      os << prefix() << time << "," << name << ",avg," << format_full(series.avg_mse[t])
         << "," << format_db(series.avg_mse[t]) << ","
         << format_full(series.avg_mse_stderr[t]) << "\n";
    }
  }
}

void emit_report(const RunReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  {
    std::ofstream csv(fs::path(out_dir) / "mse.csv", std::ios::binary);
    if (!csv) throw std::runtime_error("emit_report: cannot write mse.csv");
    write_mse_csv(csv, report);
  }

  json summary;
  summary["scenario"] = report.scenario_name;
  {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(report.config_hash));
    summary["config_hash"] = buf;
  }
  summary["agents"] = report.agents;
  summary["horizon"] = report.horizon;
  summary["trials"] = report.trials;
  summary["record_times"] = report.record_times;

  json est_obj = json::object();
  const size_t last = report.record_times.empty() ? 0 : report.record_times.size() - 1;
  for (EstimatorKind kind : report.estimators) {
    const MetricSeries& series = report.metrics.at(kind);
    json e;
    e["final_mse"] = series.avg_mse[last];
    const auto db = mse_db(series.avg_mse[last]);
    e["final_mse_db"] = db ? json(*db) : json(nullptr);
    e["final_mse_stderr"] = series.avg_mse_stderr[last];
    e["per_agent_final_mse"] = series.mse[last];
    e["reconstructed"] = report.reconstructed.at(kind);

    double max_bias_sigma = 0.0;
    for (int n = 0; n < report.agents; ++n) {
      const Vector& b = series.bias[last][static_cast<size_t>(n)];
      const Vector& s = series.bias_stderr[last][static_cast<size_t>(n)];
      for (Eigen::Index c = 0; c < b.size(); ++c) {
        if (s(c) > 0.0) max_bias_sigma = std::max(max_bias_sigma, std::abs(b(c)) / s(c));
      }
    }
    e["max_abs_bias_sigma"] = max_bias_sigma;

    json pred = json::array();
    for (size_t t = 0; t < report.record_times.size(); ++t) {
      const double p = series.predicted_avg_mse[t];
      const double emp = series.avg_mse[t];
      json row;
      row["time"] = report.record_times[t];
      row["predicted"] = p;
      row["empirical"] = emp;
      row["rel_delta"] = p > 0.0 ? (emp - p) / p : 0.0;
      pred.push_back(std::move(row));
    }
    e["predicted_vs_empirical"] = std::move(pred);
    est_obj[estimator_name(kind)] = std::move(e);
  }
  summary["estimators"] = std::move(est_obj);

  json gaps = json::array();
  bool ordering_ok = true;
  for (const auto& gap : report.final_gaps) {
    json g;
    g["better"] = estimator_name(gap.lower);
    g["worse"] = estimator_name(gap.higher);
    g["mean"] = gap.mean;
    g["stderr"] = gap.stderr_;
    bool ok;
    if (gap.lower == EstimatorKind::kCkf) {
      // The centralized baseline must not lose by more than Monte-Carlo slack.
      const double base = report.metrics.at(gap.lower).avg_mse[last];
      ok = gap.mean >= -0.01 * base;
    } else {
      ok = gap.mean > 0.0;
    }
    g["consistent"] = ok;
    ordering_ok = ordering_ok && ok;
    gaps.push_back(std::move(g));
  }
  summary["ordering"] = {{"gaps", std::move(gaps)}, {"satisfied", ordering_ok}};
  summary["pairing_ok"] = report.pairing_ok;
  summary["warnings"] = report.warnings;
  summary["max_psd_clip"] = report.max_psd_clip;
  summary["timings"] = {{"precompute_seconds", report.precompute_seconds},
                        {"simulate_seconds", report.simulate_seconds}};

  {
    std::ofstream js(fs::path(out_dir) / "summary.json", std::ios::binary);
    if (!js) throw std::runtime_error("emit_report: cannot write summary.json");
    js << summary.dump(2) << "\n";
  }
  {
    std::ofstream echo(fs::path(out_dir) / "config.echo", std::ios::binary);
    if (!echo) throw std::runtime_error("emit_report: cannot write config.echo");
    echo << report.resolved_config << "\n";
  }
}

}  // namespace dkf
