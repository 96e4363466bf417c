#pragma once

#include <atomic>
#include <cstdio>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "econosim/config.hpp"

namespace econosim {

struct SweepCell {
  std::size_t index = 0;
  std::vector<std::pair<std::string, double>> axis_values;  // canonical axis order
};

inline std::vector<std::string> sweep_axes(const ExperimentConfig& cfg) {
  // Canonical order, independent of map iteration quirks.
  static const std::vector<std::string> order = {"padding_ratio", "reserved_fraction",
                                                 "buffer_ratio", "arrival_rate", "slo_scale"};
  std::vector<std::string> axes;
  for (const auto& a : order)
    if (cfg.sweep.count(a)) axes.push_back(a);
  return axes;
}

inline std::vector<SweepCell> expand_sweep(const ExperimentConfig& cfg) {
  const auto axes = sweep_axes(cfg);
  if (axes.empty()) throw ConfigError("sweep requires at least one sweep axis");
  std::vector<SweepCell> cells;
  std::vector<std::size_t> idx(axes.size(), 0);
  while (true) {
    SweepCell cell;
    cell.index = cells.size();
    for (std::size_t a = 0; a < axes.size(); ++a)
      cell.axis_values.emplace_back(axes[a], cfg.sweep.at(axes[a])[idx[a]]);
    cells.push_back(std::move(cell));
    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < cfg.sweep.at(axes[a]).size()) break;
      idx[a] = 0;
      if (a == 0) return cells;
    }
  }
}

inline ExperimentConfig apply_cell(const ExperimentConfig& base, const SweepCell& cell) {
  ExperimentConfig cfg = base;
  cfg.sweep.clear();
  for (const auto& [axis, value] : cell.axis_values) {
    if (axis == "padding_ratio") {
      cfg.predictor.padding_ratio = value;
    } else if (axis == "reserved_fraction") {
      cfg.policy_params.reserved_fraction = value;
    } else if (axis == "buffer_ratio") {
      cfg.policy_params.buffer_ratio = value;
    } else if (axis == "arrival_rate") {
      cfg.synthetic->arrival_rate = value;
    } else if (axis == "slo_scale") {
      cfg.slo_scale = value;
    }
  }
  return cfg;
}

inline const std::vector<std::string>& sweep_metric_names() {
  static const std::vector<std::string> names = {
      "mean_jct",       "p5_jct",          "p95_jct",          "mean_tbt",
      "ssr",            "throughput_rps",  "throughput_tps",   "goodput_rps",
      "normalized_latency", "mean_kvc_written", "mean_kvc_allocated", "mean_forward_size",
      "allocation_failure_pct", "preemptions", "reserve_draws", "hosted_overruns",
      "mean_waiting",   "mean_execution",  "mean_preemption",  "mean_scheduling"};
  return names;
}

inline double sweep_metric_value(const MetricsReport& r, const std::string& name) {
  if (name == "mean_jct") return r.mean_jct;
  if (name == "p5_jct") return r.p5_jct;
  if (name == "p95_jct") return r.p95_jct;
  if (name == "mean_tbt") return r.mean_tbt;
  if (name == "ssr") return r.ssr;
  if (name == "throughput_rps") return r.throughput_rps;
  if (name == "throughput_tps") return r.throughput_tps;
  if (name == "goodput_rps") return r.goodput_rps;
  if (name == "normalized_latency") return r.normalized_latency;
  if (name == "mean_kvc_written") return r.mean_kvc_written;
  if (name == "mean_kvc_allocated") return r.mean_kvc_allocated;
  if (name == "mean_forward_size") return r.mean_forward_size;
  if (name == "allocation_failure_pct") return r.allocation_failure_pct;
  if (name == "preemptions") return static_cast<double>(r.preemptions);
  if (name == "reserve_draws") return static_cast<double>(r.reserve_draws);
  if (name == "hosted_overruns") return static_cast<double>(r.hosted_overruns);
  if (name == "mean_waiting") return r.mean_waiting;
  if (name == "mean_execution") return r.mean_execution;
  if (name == "mean_preemption") return r.mean_preemption;
  if (name == "mean_scheduling") return r.mean_scheduling;
  throw ConfigError("unknown sweep metric " + name);
}

struct SweepResult {
  std::vector<std::string> axes;
  // One entry per cell, in cell order: per policy, the full report.
  std::vector<std::pair<SweepCell, std::map<std::string, MetricsReport>>> cells;
};

// Cartesian sweep; cells run independently across worker threads and are
// merged in axis order regardless of completion order.
inline SweepResult run_sweep(const ExperimentConfig& cfg, int jobs = 0) {
  SweepResult result;
  result.axes = sweep_axes(cfg);
  const std::vector<SweepCell> cells = expand_sweep(cfg);
  result.cells.resize(cells.size());

  if (jobs <= 0) jobs = cfg.jobs;
  if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
  if (jobs < 1) jobs = 1;
  jobs = std::min<int>(jobs, static_cast<int>(cells.size()));

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;

  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        const ExperimentConfig cell_cfg = apply_cell(cfg, cells[i]);
        auto reports = run_experiment(cell_cfg);
        result.cells[i] = {cells[i], std::move(reports)};
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(jobs));
  for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return result;
}

// Long format: one row per (cell, policy, metric).
inline void write_sweep_csv(std::ostream& out, const SweepResult& result) {
  for (const auto& axis : result.axes) out << axis << ',';
  out << "policy,metric,value\n";
  char buf[64];
  for (const auto& [cell, reports] : result.cells) {
    for (const auto& [policy, report] : reports) {
      for (const auto& metric : sweep_metric_names()) {
        for (const auto& [axis, value] : cell.axis_values) {
          std::snprintf(buf, sizeof(buf), "%.17g", value);
          out << buf << ',';
        }
        std::snprintf(buf, sizeof(buf), "%.17g", sweep_metric_value(report, metric));
        out << policy << ',' << metric << ',' << buf << '\n';
      }
    }
  }
}

}  // namespace econosim
