// econosim: trace-driven simulator of iteration-level LLM serving schedulers.
//
// Subcommands: run, sweep, compare, gen-trace. Exit codes: 0 ok, 2 config
// error, 3 simulation error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "econosim/config.hpp"
#include "econosim/sweep.hpp"

namespace fs = std::filesystem;
using namespace econosim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitSim = 3;

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open output file: " + path.string());
  out << content;
}

int cmd_run(const std::string& config_path, const std::string& output_override) {
  ExperimentConfig cfg = load_config(config_path);
  apply_seed_override(cfg);
  if (!output_override.empty()) cfg.output_dir = output_override;
  auto reports = run_experiment(cfg);
  for (const auto& [policy, report] : reports) {
    const fs::path path = fs::path(cfg.output_dir) / ("report_" + policy + ".json");
    write_file(path, to_json(report).dump(2) + "\n");
    std::cout << policy << ": mean_jct=" << report.mean_jct << "s ssr=" << report.ssr
              << " throughput=" << report.throughput_rps << " req/s -> " << path.string()
              << "\n";
  }
  if (reports.size() >= 2) {
    std::map<std::string, MetricsReport> by_name(reports.begin(), reports.end());
    std::cout << "\n" << render_table(compare(by_name, cfg.policies.front()));
  }
  return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& out_csv, int jobs) {
  ExperimentConfig cfg = load_config(config_path);
  apply_seed_override(cfg);
  SweepResult result = run_sweep(cfg, jobs);
  const fs::path path =
      out_csv.empty() ? fs::path(cfg.output_dir) / "sweep.csv" : fs::path(out_csv);
  std::ostringstream oss;
  write_sweep_csv(oss, result);
  write_file(path, oss.str());
  std::cout << result.cells.size() << " cells x " << cfg.policies.size() << " policies -> "
            << path.string() << "\n";
  return kExitOk;
}

int cmd_gen_trace(const std::string& spec_path, const std::string& out_path) {
  std::ifstream in(spec_path);
  if (!in) throw ConfigError("cannot open spec file: " + spec_path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("spec parse error: ") + e.what());
  }
  SyntheticTraceSpec spec;
  if (j.contains("trace")) {
    ExperimentConfig cfg = parse_config(j);
    apply_seed_override(cfg);
    if (!cfg.synthetic) throw ConfigError("gen-trace config has no trace.synthetic block");
    spec = *cfg.synthetic;
  } else {
    detail::check_keys(j, {"n_requests", "arrival_rate", "prompt", "response", "seed"}, "spec");
    spec.n_requests = j.value("n_requests", spec.n_requests);
    spec.arrival_rate = j.value("arrival_rate", spec.arrival_rate);
    spec.seed = j.value("seed", spec.seed);
    if (j.contains("prompt")) spec.prompt_dist = detail::parse_length_dist(j.at("prompt"), "prompt");
    if (j.contains("response"))
      spec.rl_dist = detail::parse_length_dist(j.at("response"), "response");
    const char* env = std::getenv("ECONOSIM_SEED");
    if (env && *env) spec.seed = std::strtoull(env, nullptr, 10);
  }
  const Trace trace = generate_synthetic(spec);
  std::ostringstream oss;
  write_trace_csv(oss, trace);
  write_file(out_path, oss.str());
  std::cout << trace.size() << " records -> " << out_path << "\n";
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& report_paths, std::string baseline) {
  std::map<std::string, MetricsReport> reports;
  for (const auto& path : report_paths) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open report: " + path);
    Json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw ConfigError("report parse error in " + path + ": " + e.what());
    }
    MetricsReport r;
    r.policy = j.at("policy").get<std::string>();
    r.trace_hash = j.at("trace_hash").get<std::uint64_t>();
    const Json& a = j.at("aggregates");
    r.mean_jct = a.value("mean_jct", 0.0);
    r.p5_jct = a.value("p5_jct", 0.0);
    r.p95_jct = a.value("p95_jct", 0.0);
    r.mean_tbt = a.value("mean_tbt", 0.0);
    r.ssr = a.value("ssr", 0.0);
    r.throughput_rps = a.value("throughput_rps", 0.0);
    r.throughput_tps = a.value("throughput_tps", 0.0);
    r.goodput_rps = a.value("goodput_rps", 0.0);
    r.normalized_latency = a.value("normalized_latency", 0.0);
    r.mean_kvc_written = a.value("mean_kvc_written", 0.0);
    r.mean_kvc_allocated = a.value("mean_kvc_allocated", 0.0);
    r.mean_forward_size = a.value("mean_forward_size", 0.0);
    r.allocation_failure_pct = a.value("allocation_failure_pct", 0.0);
    if (baseline.empty()) baseline = r.policy;
    reports[r.policy] = std::move(r);
  }
  std::cout << render_table(compare(reports, baseline));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"econosim: iteration-level LLM serving scheduler simulator"};
  app.require_subcommand(0, 1);

  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print the default config as JSON and exit");

  std::string config_path, output_override, out_csv, spec_path, out_path, baseline;
  std::vector<std::string> report_paths;
  int jobs = 0;

  auto* run_cmd = app.add_subcommand("run", "run every configured policy on one trace");
  run_cmd->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  run_cmd->add_option("-o,--output", output_override, "output directory override");

  auto* sweep_cmd = app.add_subcommand("sweep", "run the configured parameter sweep");
  sweep_cmd->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  sweep_cmd->add_option("-o,--output", out_csv, "output CSV path");
  sweep_cmd->add_option("-j,--jobs", jobs, "worker threads (default: all cores)");

  auto* gen_cmd = app.add_subcommand("gen-trace", "generate a synthetic trace CSV");
  gen_cmd->add_option("-c,--config", spec_path, "synthetic spec or full config (JSON)")
      ->required();
  gen_cmd->add_option("-o,--output", out_path, "output CSV path")->required();

  auto* cmp_cmd = app.add_subcommand("compare", "compare report JSON files");
  cmp_cmd->add_option("reports", report_paths, "report files")->expected(-2);
  cmp_cmd->add_option("-b,--baseline", baseline, "baseline policy (default: first report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (print_defaults) {
      std::cout << to_json(default_config()).dump(2) << "\n";
      return kExitOk;
    }
    if (run_cmd->parsed()) return cmd_run(config_path, output_override);
    if (sweep_cmd->parsed()) return cmd_sweep(config_path, out_csv, jobs);
    if (gen_cmd->parsed()) return cmd_gen_trace(spec_path, out_path);
    if (cmp_cmd->parsed()) return cmd_compare(report_paths, baseline);
    std::cout << app.help();
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SimulationError& e) {
    std::cerr << "simulation error: " << e.what() << "\n";
    return kExitSim;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitSim;
  }
}
