#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "econosim/common.hpp"

namespace econosim {

using Json = nlohmann::ordered_json;

struct RequestRecord {
  RequestId id = -1;
  Seconds arrival = 0.0;
  Seconds first_token_time = -1.0;
  Seconds completion_time = 0.0;  // penalty-extended
  Seconds waiting_time = 0.0;
  Seconds execution_time = 0.0;
  Seconds preemption_time = 0.0;
  Seconds scheduling_time_share = 0.0;
  int preempt_count = 0;
  int reserve_draws = 0;
  bool met_slo = false;
  Tokens prompt_len = 0;
  Tokens true_rl = 0;
  Seconds slo_deadline = 0.0;
  bool alloc_failure = false;

  Seconds jct() const { return completion_time - arrival; }
};

struct IterationSample {
  long iter = 0;
  Seconds clock = 0.0;
  Seconds dt = 0.0;
  Tokens forward_size = 0;
  double kvc_written_frac = 0.0;
  double kvc_allocated_frac = 0.0;
  int completed = 0;
  int pts_admitted = 0;
  bool pt_admittable = false;  // a queued PT fit both budgets at formation time
  long idle_repeat = 0;        // >0: this sample stands for that many empty ticks
};

struct MetricsReport {
  std::string policy;
  std::uint64_t trace_hash = 0;

  double mean_jct = 0.0, p5_jct = 0.0, p95_jct = 0.0;
  double mean_tbt = 0.0;
  double ssr = 0.0;
  double throughput_rps = 0.0, throughput_tps = 0.0;
  double goodput_rps = 0.0;
  double normalized_latency = 0.0;
  double mean_kvc_written = 0.0, mean_kvc_allocated = 0.0;
  double mean_forward_size = 0.0;
  double allocation_failure_pct = 0.0;
  double tfs_hit_frac = 0.0;    // executed iterations with fs >= 0.95 * tfs
  double pt_admit_frac = 0.0;   // executed iterations that admitted >= 1 PT
  std::map<int, double> iteration_completion_histogram;

  long iterations = 0;  // executed (non-idle)
  Seconds makespan = 0.0;
  long preemptions = 0;
  long reserve_draws = 0;
  long hosted_slots = 0;
  long hosted_overruns = 0;
  double mean_waiting = 0.0, mean_execution = 0.0, mean_preemption = 0.0, mean_scheduling = 0.0;

  std::vector<RequestRecord> records;
  Json config_echo;
};

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double rank = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace detail

// Aggregates per-request records and per-iteration samples. KVC utilization
// and forward size are means over executed iterations; goodput counts only
// SLO-meeting requests.
inline MetricsReport aggregate(const std::vector<RequestRecord>& records,
                               const std::vector<IterationSample>& samples, Tokens tfs) {
  if (records.empty()) throw SimulationError("aggregate: no request records");
  MetricsReport r;
  r.records = records;

  std::vector<double> jcts;
  jcts.reserve(records.size());
  double tbt_sum = 0.0;
  long tbt_n = 0;
  double norm_sum = 0.0;
  long met = 0;
  Tokens tokens_total = 0;
  long failures = 0;
  for (const auto& rec : records) {
    jcts.push_back(rec.jct());
    if (rec.true_rl >= 2 && rec.first_token_time >= 0.0) {
      tbt_sum += (rec.completion_time - rec.first_token_time) /
                 static_cast<double>(rec.true_rl - 1);
      ++tbt_n;
    }
    norm_sum += rec.jct() / static_cast<double>(rec.true_rl);
    if (rec.met_slo) ++met;
    tokens_total += rec.true_rl;
    r.preemptions += rec.preempt_count;
    r.reserve_draws += rec.reserve_draws;
    if (rec.alloc_failure) ++failures;
    r.makespan = std::max(r.makespan, rec.completion_time);
    r.mean_waiting += rec.waiting_time;
    r.mean_execution += rec.execution_time;
    r.mean_preemption += rec.preemption_time;
    r.mean_scheduling += rec.scheduling_time_share;
  }
  const double n = static_cast<double>(records.size());
  r.mean_jct = 0.0;
  for (double j : jcts) r.mean_jct += j;
  r.mean_jct /= n;
  r.p5_jct = detail::percentile(jcts, 0.05);
  r.p95_jct = detail::percentile(jcts, 0.95);
  r.mean_tbt = tbt_n > 0 ? tbt_sum / static_cast<double>(tbt_n) : 0.0;
  r.ssr = static_cast<double>(met) / n;
  r.normalized_latency = norm_sum / n;
  r.mean_waiting /= n;
  r.mean_execution /= n;
  r.mean_preemption /= n;
  r.mean_scheduling /= n;
  if (r.makespan > 0.0) {
    r.throughput_rps = n / r.makespan;
    r.throughput_tps = static_cast<double>(tokens_total) / r.makespan;
    r.goodput_rps = static_cast<double>(met) / r.makespan;
  }
  r.allocation_failure_pct = 100.0 * static_cast<double>(failures) / n;

  long executed = 0;
  long tfs_hits = 0;
  long pt_iters = 0;
  std::map<int, long> hist;
  for (const auto& s : samples) {
    if (s.idle_repeat > 0) continue;
    ++executed;
    r.mean_forward_size += static_cast<double>(s.forward_size);
    r.mean_kvc_written += s.kvc_written_frac;
    r.mean_kvc_allocated += s.kvc_allocated_frac;
    if (static_cast<double>(s.forward_size) >= 0.95 * static_cast<double>(tfs)) ++tfs_hits;
    if (s.pts_admitted > 0) ++pt_iters;
    hist[s.completed] += 1;
  }
  r.iterations = executed;
  if (executed > 0) {
    r.mean_forward_size /= static_cast<double>(executed);
    r.mean_kvc_written /= static_cast<double>(executed);
    r.mean_kvc_allocated /= static_cast<double>(executed);
    r.tfs_hit_frac = static_cast<double>(tfs_hits) / static_cast<double>(executed);
    r.pt_admit_frac = static_cast<double>(pt_iters) / static_cast<double>(executed);
    for (const auto& [count, iters] : hist)
      r.iteration_completion_histogram[count] =
          static_cast<double>(iters) / static_cast<double>(executed);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline Json to_json(const MetricsReport& r, bool with_records = true) {
  Json j;
  j["policy"] = r.policy;
  j["trace_hash"] = r.trace_hash;
  Json agg;
  agg["mean_jct"] = r.mean_jct;
  agg["p5_jct"] = r.p5_jct;
  agg["p95_jct"] = r.p95_jct;
  agg["mean_tbt"] = r.mean_tbt;
  agg["ssr"] = r.ssr;
  agg["throughput_rps"] = r.throughput_rps;
  agg["throughput_tps"] = r.throughput_tps;
  agg["goodput_rps"] = r.goodput_rps;
  agg["normalized_latency"] = r.normalized_latency;
  agg["mean_kvc_written"] = r.mean_kvc_written;
  agg["mean_kvc_allocated"] = r.mean_kvc_allocated;
  agg["mean_forward_size"] = r.mean_forward_size;
  agg["allocation_failure_pct"] = r.allocation_failure_pct;
  agg["tfs_hit_frac"] = r.tfs_hit_frac;
  agg["pt_admit_frac"] = r.pt_admit_frac;
  agg["iterations"] = r.iterations;
  agg["makespan"] = r.makespan;
  agg["preemptions"] = r.preemptions;
  agg["reserve_draws"] = r.reserve_draws;
  agg["hosted_slots"] = r.hosted_slots;
  agg["hosted_overruns"] = r.hosted_overruns;
  agg["mean_waiting"] = r.mean_waiting;
  agg["mean_execution"] = r.mean_execution;
  agg["mean_preemption"] = r.mean_preemption;
  agg["mean_scheduling"] = r.mean_scheduling;
  Json hist = Json::object();
  for (const auto& [count, frac] : r.iteration_completion_histogram)
    hist[std::to_string(count)] = frac;
  agg["iteration_completion_histogram"] = hist;
  j["aggregates"] = agg;
  if (!r.config_echo.is_null()) j["config"] = r.config_echo;
  if (with_records) {
    Json recs = Json::array();
    for (const auto& rec : r.records) {
      Json x;
      x["id"] = rec.id;
      x["arrival"] = rec.arrival;
      x["first_token_time"] = rec.first_token_time;
      x["completion_time"] = rec.completion_time;
      x["waiting_time"] = rec.waiting_time;
      x["execution_time"] = rec.execution_time;
      x["preemption_time"] = rec.preemption_time;
      x["scheduling_time_share"] = rec.scheduling_time_share;
      x["preempt_count"] = rec.preempt_count;
      x["reserve_draws"] = rec.reserve_draws;
      x["met_slo"] = rec.met_slo;
      x["prompt_len"] = rec.prompt_len;
      x["true_rl"] = rec.true_rl;
      x["slo_deadline"] = rec.slo_deadline;
      recs.push_back(std::move(x));
    }
    j["records"] = std::move(recs);
  }
  return j;
}

// Metric rows shown by the side-by-side comparison.
inline const std::vector<std::pair<std::string, double MetricsReport::*>>& comparison_metrics() {
  static const std::vector<std::pair<std::string, double MetricsReport::*>> rows = {
      {"mean_jct", &MetricsReport::mean_jct},
      {"p95_jct", &MetricsReport::p95_jct},
      {"mean_tbt", &MetricsReport::mean_tbt},
      {"ssr", &MetricsReport::ssr},
      {"throughput_rps", &MetricsReport::throughput_rps},
      {"throughput_tps", &MetricsReport::throughput_tps},
      {"goodput_rps", &MetricsReport::goodput_rps},
      {"normalized_latency", &MetricsReport::normalized_latency},
      {"mean_kvc_written", &MetricsReport::mean_kvc_written},
      {"mean_forward_size", &MetricsReport::mean_forward_size},
      {"allocation_failure_pct", &MetricsReport::allocation_failure_pct},
  };
  return rows;
}

struct ComparisonTable {
  std::string baseline;
  std::vector<std::string> policies;
  // metric -> policy -> value; ratio rows are value / baseline value.
  std::map<std::string, std::map<std::string, double>> values;
  std::map<std::string, std::map<std::string, double>> ratios;
};

inline ComparisonTable compare(const std::map<std::string, MetricsReport>& reports,
                               const std::string& baseline) {
  if (reports.size() < 2) throw ConfigError("compare needs at least two reports");
  auto base_it = reports.find(baseline);
  if (base_it == reports.end()) throw ConfigError("baseline policy '" + baseline + "' not present");
  const std::uint64_t hash = base_it->second.trace_hash;
  for (const auto& [name, rep] : reports)
    if (rep.trace_hash != hash)
      throw ConfigError("trace hash mismatch: reports were produced from different traces");

  ComparisonTable t;
  t.baseline = baseline;
  for (const auto& [name, rep] : reports) t.policies.push_back(name);
  for (const auto& [metric, member] : comparison_metrics()) {
    const double base = base_it->second.*member;
    for (const auto& [name, rep] : reports) {
      const double v = rep.*member;
      t.values[metric][name] = v;
      t.ratios[metric][name] = base != 0.0 ? v / base : 0.0;
    }
  }
  return t;
}

inline std::string render_table(const ComparisonTable& t) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-24s", "metric");
  out += buf;
  for (const auto& p : t.policies) {
    std::snprintf(buf, sizeof(buf), " %16s", p.c_str());
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), " %16s", ("vs " + t.baseline).c_str());
  out += buf;
  out += '\n';
  for (const auto& [metric, member] : comparison_metrics()) {
    std::snprintf(buf, sizeof(buf), "%-24s", metric.c_str());
    out += buf;
    for (const auto& p : t.policies) {
      std::snprintf(buf, sizeof(buf), " %16.6g", t.values.at(metric).at(p));
      out += buf;
    }
    // ratio of the last policy against the baseline, a quick scan column
    const auto& ratio_row = t.ratios.at(metric);
    std::snprintf(buf, sizeof(buf), " %15.3fx", ratio_row.at(t.policies.back()));
    out += buf;
    out += '\n';
  }
  return out;
}

inline std::uint64_t hash_trace_bytes(const std::string& bytes) {
  // FNV-1a
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace econosim
