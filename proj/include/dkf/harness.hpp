#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dkf/estimators.hpp"
#include "dkf/gains.hpp"
#include "dkf/model.hpp"
#include "dkf/network.hpp"
#include "dkf/pseudo.hpp"

namespace dkf {

enum class EstimatorKind { kCkf, kCikf, kDikf, kPikf };

std::string estimator_name(EstimatorKind kind);
EstimatorKind parse_estimator(const std::string& name);

/// A fully instantiated scenario: every random spec (graph, field matrix,
/// sensor assignment) already resolved into explicit objects, with the
/// resolved configuration retained in JSON form for config.echo.
struct Scenario {
  std::string name;
  std::uint64_t seed = 0;
  int trials = 1;
  int horizon = 0;
  std::vector<int> record_times;
  std::vector<EstimatorKind> estimators;
  std::map<EstimatorKind, GainConfig> gain_configs;
  FieldModel model;
  SensorSuite suite;
  SensorNetwork network;
  PseudoModel pseudo;
  std::string resolved_config;  // normative resolved form, JSON text
  std::uint64_t config_hash = 0;
};

struct ValidationIssue {
  enum class Severity { kFatal, kWarning, kInfo };
  Severity severity = Severity::kFatal;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  int observability_rank = -1;  // rank of the stacked observability matrix

  bool ok() const;
  std::vector<std::string> fatal_messages() const;
  std::vector<std::string> warning_messages() const;
};

struct LoadResult {
  std::optional<Scenario> scenario;  // present iff report.ok()
  ValidationReport report;
};

/// Parses, instantiates, and validates a scenario configuration. Fatal
/// issues (disconnected graph, singular R, malformed config) leave scenario
/// empty; warnings do not.
LoadResult load_scenario_json(const nlohmann::json& config);
LoadResult load_scenario_text(const std::string& json_text);
LoadResult load_scenario_file(const std::string& path);

/// 10*log10(mse); empty for mse <= 0.
std::optional<double> mse_db(double mse);

struct MetricSeries {
  // Indexed [record time][agent]; the network average sits in avg_*.
  std::vector<std::vector<double>> mse;
  std::vector<std::vector<double>> mse_stderr;
  std::vector<std::vector<Vector>> bias;
  std::vector<std::vector<Vector>> bias_stderr;
  std::vector<double> avg_mse;
  std::vector<double> avg_mse_stderr;
  std::vector<double> predicted_avg_mse;  // from the gain-design recursion
};

struct PairedGap {
  EstimatorKind lower;   // expected-better estimator
  EstimatorKind higher;  // expected-worse estimator
  double mean = 0.0;     // mean over trials of mse(higher) - mse(lower)
  double stderr_ = 0.0;  // paired standard error of the mean
};

struct RunReport {
  std::string scenario_name;
  std::uint64_t config_hash = 0;
  int agents = 0;
  int horizon = 0;
  int trials = 0;
  std::vector<int> record_times;
  std::vector<EstimatorKind> estimators;
  std::map<EstimatorKind, MetricSeries> metrics;
  std::map<EstimatorKind, bool> reconstructed;  // estimator built from a
                                                // reconstructed recursion
  std::vector<PairedGap> final_gaps;            // adjacent pairs of the
                                                // expected performance chain
  bool pairing_ok = true;  // all estimators consumed identical observations
  std::vector<std::string> warnings;
  double max_psd_clip = 0.0;
  double precompute_seconds = 0.0;
  double simulate_seconds = 0.0;
  std::string resolved_config;
};

struct RunOptions {
  int threads = 0;  // 0 = hardware concurrency
  const GainSchedule* preloaded_schedule = nullptr;  // optional, for `simulate --schedule`
};

/// Monte-Carlo run: precomputes all gain schedules once, then runs every
/// requested estimator on the same per-trial trajectory. Deterministic in
/// (config, seed) regardless of thread count.
RunReport run_scenario(const Scenario& scenario, const RunOptions& options = {});

/// Writes mse.csv, summary.json and config.echo into out_dir.
void emit_report(const RunReport& report, const std::string& out_dir);

/// CSV emission into an arbitrary stream; prepends scenario_column when
/// non-empty (used by the compare subcommand).
void write_mse_csv(std::ostream& os, const RunReport& report,
                   const std::string& scenario_column = "",
                   bool with_header = true);

}  // namespace dkf
