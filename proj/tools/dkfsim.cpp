// Command-line front end: scenario validation, graph generation, gain
// precomputation, and Monte-Carlo simulation runs.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dkf/gains.hpp"
#include "dkf/harness.hpp"
#include "dkf/network.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

void print_report(const dkf::ValidationReport& report) {
  for (const auto& issue : report.issues) {
    const char* tag = issue.severity == dkf::ValidationIssue::Severity::kFatal
                          ? "error"
                          : issue.severity == dkf::ValidationIssue::Severity::kWarning
                                ? "warning"
                                : "info";
    std::cerr << tag << ": " << issue.message << "\n";
  }
}

dkf::Scenario load_or_exit(const std::string& config_path) {
  auto loaded = dkf::load_scenario_file(config_path);
  print_report(loaded.report);
  if (!loaded.scenario) {
    std::exit(kExitValidation);
  }
  return std::move(*loaded.scenario);
}

int cmd_validate(const std::string& config_path) {
  auto loaded = dkf::load_scenario_file(config_path);
  print_report(loaded.report);
  if (!loaded.scenario) {
    std::cout << "invalid\n";
    return kExitValidation;
  }
  std::cout << "valid\n";
  return kExitOk;
}

int cmd_graph(const std::string& kind, int n, double p, double radius,
              std::uint64_t seed, const std::string& out_path) {
  dkf::GraphParams params;
  params.edge_probability = p;
  params.radius = radius;
  dkf::RngStream rng(seed, 0, dkf::Purpose::kGraph);
  const auto net = dkf::generate_network(dkf::parse_graph_kind(kind), n, params, rng);
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot write " + out_path);
  dkf::write_edge_list(os, net);
  std::cout << "nodes=" << net.node_count() << " edges=" << net.edges().size()
            << " lambda2=" << net.algebraic_connectivity() << "\n";
  return kExitOk;
}

int cmd_gains(const std::string& config_path, const std::string& out_path) {
  const auto scenario = load_or_exit(config_path);
  const auto schedule = dkf::precompute_schedule(
      scenario.model, scenario.suite, scenario.network, scenario.pseudo,
      scenario.gain_configs.at(dkf::EstimatorKind::kCikf));
  schedule.save(out_path);
  std::cout << "schedule: horizon=" << schedule.horizon
            << " agents=" << schedule.agents << " mode="
            << (schedule.mode == dkf::GainMode::kOptimal ? "optimal" : "static")
            << " -> " << out_path << "\n";
  for (const auto& w : schedule.warnings) std::cerr << "warning: " << w << "\n";
  return kExitOk;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir,
                 const std::string& schedule_path, int threads) {
  const auto scenario = load_or_exit(config_path);
  dkf::RunOptions options;
  options.threads = threads;
  dkf::GainSchedule loaded;
  if (!schedule_path.empty()) {
    loaded = dkf::GainSchedule::load(schedule_path);
    options.preloaded_schedule = &loaded;
  }
  dkf::RunReport report;
  try {
    report = dkf::run_scenario(scenario, options);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  dkf::emit_report(report, out_dir);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  const size_t last = report.record_times.empty() ? 0 : report.record_times.size() - 1;
  for (auto kind : report.estimators) {
    const auto& series = report.metrics.at(kind);
    std::cout << dkf::estimator_name(kind) << ": final avg mse "
              << series.avg_mse[last];
    const auto db = dkf::mse_db(series.avg_mse[last]);
    if (db) std::cout << " (" << *db << " dB)";
    std::cout << "\n";
  }
  std::cout << "report written to " << out_dir << "\n";
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& config_paths,
                const std::string& out_dir, int threads) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / "mse.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write merged mse.csv");
  bool first = true;
  dkf::RunOptions options;
  options.threads = threads;
  for (const auto& path : config_paths) {
    const auto scenario = load_or_exit(path);
    const auto report = dkf::run_scenario(scenario, options);
    dkf::write_mse_csv(csv, report, scenario.name, first);
    first = false;
    dkf::emit_report(report, (fs::path(out_dir) / scenario.name).string());
    std::cout << scenario.name << ": done\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed Kalman filtering simulator for sensor networks"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_path;
  std::string schedule_path;
  std::vector<std::string> config_paths;
  std::string kind = "geometric";
  int n = 10;
  double p = 0.3;
  double radius = 0.4;
  std::uint64_t seed = 0;
  int threads = 0;

  auto* validate = app.add_subcommand("validate", "Check a scenario configuration");
  validate->add_option("--config", config_path, "Scenario config (JSON)")->required();

  auto* graph = app.add_subcommand("graph", "Generate a connected graph as an edge list");
  graph->add_option("--kind", kind, "path|cycle|complete|grid|erdos_renyi|geometric");
  graph->add_option("--n", n, "Node count")->required();
  graph->add_option("--p", p, "Edge probability (erdos_renyi)");
  graph->add_option("--radius", radius, "Connection radius (geometric)");
  graph->add_option("--seed", seed, "Generator seed");
  graph->add_option("--out", out_path, "Output edge-list file")->required();

  auto* gains = app.add_subcommand("gains", "Precompute and store a gain schedule");
  gains->add_option("--config", config_path, "Scenario config (JSON)")->required();
  gains->add_option("--out", out_path, "Output schedule file")->required();

  auto* simulate = app.add_subcommand("simulate", "Run the Monte-Carlo study");
  simulate->add_option("--config", config_path, "Scenario config (JSON)")->required();
  simulate->add_option("--out", out_path, "Output directory")->required();
  simulate->add_option("--schedule", schedule_path, "Precomputed gain schedule");
  simulate->add_option("--threads", threads, "Worker threads (0 = all cores)");

  auto* compare = app.add_subcommand("compare", "Run several configs into one CSV");
  compare->add_option("--configs", config_paths, "Scenario configs")->required();
  compare->add_option("--out", out_path, "Output directory")->required();
  compare->add_option("--threads", threads, "Worker threads (0 = all cores)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) return cmd_validate(config_path);
    if (graph->parsed()) return cmd_graph(kind, n, p, radius, seed, out_path);
    if (gains->parsed()) return cmd_gains(config_path, out_path);
    if (simulate->parsed()) return cmd_simulate(config_path, out_path, schedule_path, threads);
    if (compare->parsed()) return cmd_compare(config_paths, out_path, threads);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
