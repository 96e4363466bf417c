#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "econosim/engine.hpp"
#include "econosim/metrics.hpp"
#include "econosim/policies.hpp"
#include "econosim/workload.hpp"

namespace econosim {

struct ExperimentConfig {
  std::optional<std::string> trace_file;
  std::optional<SyntheticTraceSpec> synthetic;
  std::vector<std::string> policies;
  KvcConfig kvc;
  CostModel cost;
  PredictorConfig predictor;
  OrderingConfig ordering;
  PolicyConfig policy_params;
  double slo_scale = 2.0;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  int jobs = 0;  // 0: all cores
  std::map<std::string, std::vector<double>> sweep;

  void validate() const {
    if (policies.empty()) throw ConfigError("at least one policy is required");
    for (const auto& p : policies) parse_policy(p);
    if (!trace_file && !synthetic)
      throw ConfigError("a trace source is required: trace.file or trace.synthetic");
    if (trace_file && synthetic)
      throw ConfigError("trace.file and trace.synthetic are mutually exclusive");
    if (slo_scale <= 0.0) throw ConfigError("slo_scale must be > 0");
    policy_params.validate();
    cost.validate();
    predictor.validate();
    ordering.validate();
    static const std::set<std::string> kAxes = {"padding_ratio", "reserved_fraction",
                                                "buffer_ratio", "arrival_rate", "slo_scale"};
    for (const auto& [axis, values] : sweep) {
      if (!kAxes.count(axis))
        throw ConfigError("unknown sweep axis '" + axis +
                          "'; valid axes: padding_ratio, reserved_fraction, buffer_ratio, "
                          "arrival_rate, slo_scale");
      if (values.empty()) throw ConfigError("sweep axis '" + axis + "' has an empty value list");
      if (axis == "arrival_rate" && !synthetic)
        throw ConfigError("sweep axis arrival_rate requires a synthetic trace");
    }
  }
};

namespace detail {

inline void check_keys(const Json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

inline LengthDist parse_length_dist(const Json& j, const std::string& where) {
  check_keys(j, {"mean", "min", "max", "sigma"}, where);
  LengthDist d;
  d.mean = j.value("mean", d.mean);
  d.min_value = j.value("min", d.min_value);
  d.max_value = j.value("max", d.max_value);
  d.sigma = j.value("sigma", d.sigma);
  return d;
}

inline Json length_dist_json(const LengthDist& d) {
  Json j;
  j["mean"] = d.mean;
  j["min"] = d.min_value;
  j["max"] = d.max_value;
  j["sigma"] = d.sigma;
  return j;
}

}  // namespace detail

inline ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.policies = {"econoserve-full", "vllm"};
  SyntheticTraceSpec spec;
  spec.n_requests = 2000;
  spec.arrival_rate = 20.0;
  cfg.synthetic = spec;
  return cfg;
}

inline ExperimentConfig parse_config(const Json& j) {
  ExperimentConfig cfg = default_config();
  cfg.synthetic.reset();
  detail::check_keys(j,
                     {"trace", "policies", "kvc", "cost", "predictor", "policy_params",
                      "ordering", "slo_scale", "seed", "output_dir", "jobs", "sweep"},
                     "config");
  cfg.seed = j.value("seed", cfg.seed);
  cfg.slo_scale = j.value("slo_scale", cfg.slo_scale);
  cfg.output_dir = j.value("output_dir", cfg.output_dir);
  cfg.jobs = j.value("jobs", cfg.jobs);
  if (j.contains("policies")) cfg.policies = j.at("policies").get<std::vector<std::string>>();

  if (j.contains("trace")) {
    const Json& t = j.at("trace");
    detail::check_keys(t, {"file", "synthetic"}, "trace");
    if (t.contains("file")) cfg.trace_file = t.at("file").get<std::string>();
    if (t.contains("synthetic")) {
      const Json& s = t.at("synthetic");
      detail::check_keys(s, {"n_requests", "arrival_rate", "prompt", "response", "seed"},
                         "trace.synthetic");
      SyntheticTraceSpec spec;
      spec.n_requests = s.value("n_requests", spec.n_requests);
      spec.arrival_rate = s.value("arrival_rate", spec.arrival_rate);
      spec.seed = s.value("seed", cfg.seed);
      if (s.contains("prompt"))
        spec.prompt_dist = detail::parse_length_dist(s.at("prompt"), "trace.synthetic.prompt");
      if (s.contains("response"))
        spec.rl_dist = detail::parse_length_dist(s.at("response"), "trace.synthetic.response");
      cfg.synthetic = spec;
    }
  }

  if (j.contains("kvc")) {
    const Json& k = j.at("kvc");
    detail::check_keys(k, {"capacity", "block_size"}, "kvc");
    cfg.kvc.capacity = k.value("capacity", cfg.kvc.capacity);
    cfg.kvc.block_size = k.value("block_size", cfg.kvc.block_size);
  }

  if (j.contains("cost")) {
    const Json& c = j.at("cost");
    detail::check_keys(c,
                       {"t_base", "t_token", "t_token_over", "preempt_offload_penalty",
                        "preempt_free_penalty", "reserve_penalty", "sched_cost_per_exam",
                        "swap_stall"},
                       "cost");
    cfg.cost.t_base = c.value("t_base", cfg.cost.t_base);
    cfg.cost.t_token = c.value("t_token", cfg.cost.t_token);
    cfg.cost.t_token_over = c.value("t_token_over", cfg.cost.t_token_over);
    cfg.cost.preempt_offload_penalty =
        c.value("preempt_offload_penalty", cfg.cost.preempt_offload_penalty);
    cfg.cost.preempt_free_penalty = c.value("preempt_free_penalty", cfg.cost.preempt_free_penalty);
    cfg.cost.reserve_penalty = c.value("reserve_penalty", cfg.cost.reserve_penalty);
    cfg.cost.sched_cost_per_exam = c.value("sched_cost_per_exam", cfg.cost.sched_cost_per_exam);
    cfg.cost.swap_stall = c.value("swap_stall", cfg.cost.swap_stall);
  }

  if (j.contains("predictor")) {
    const Json& p = j.at("predictor");
    detail::check_keys(
        p, {"model", "sigma", "accuracy", "tolerance", "padding_ratio", "quantum", "seed"},
        "predictor");
    const std::string m = p.value("model", std::string("oracle"));
    if (m == "oracle")
      cfg.predictor.model = ErrorModel::Oracle;
    else if (m == "lognormal")
      cfg.predictor.model = ErrorModel::Lognormal;
    else if (m == "bucket")
      cfg.predictor.model = ErrorModel::BucketAccuracy;
    else
      throw ConfigError("unknown predictor model '" + m + "'; valid: oracle, lognormal, bucket");
    cfg.predictor.sigma = p.value("sigma", cfg.predictor.sigma);
    cfg.predictor.accuracy = p.value("accuracy", cfg.predictor.accuracy);
    cfg.predictor.tolerance = p.value("tolerance", cfg.predictor.tolerance);
    cfg.predictor.padding_ratio = p.value("padding_ratio", cfg.predictor.padding_ratio);
    cfg.predictor.quantum = p.value("quantum", cfg.predictor.quantum);
    cfg.predictor.seed = p.value("seed", cfg.seed);
  } else {
    cfg.predictor.seed = cfg.seed;
  }

  if (j.contains("policy_params")) {
    const Json& p = j.at("policy_params");
    detail::check_keys(p,
                       {"tfs", "batch_size_cap", "chunk_size", "reserved_fraction",
                        "buffer_ratio", "max_output_len", "vllm_recompute"},
                       "policy_params");
    cfg.policy_params.tfs = p.value("tfs", cfg.policy_params.tfs);
    cfg.policy_params.batch_size_cap = p.value("batch_size_cap", cfg.policy_params.batch_size_cap);
    cfg.policy_params.chunk_size = p.value("chunk_size", cfg.policy_params.chunk_size);
    cfg.policy_params.reserved_fraction =
        p.value("reserved_fraction", cfg.policy_params.reserved_fraction);
    cfg.policy_params.buffer_ratio = p.value("buffer_ratio", cfg.policy_params.buffer_ratio);
    cfg.policy_params.max_output_len = p.value("max_output_len", cfg.policy_params.max_output_len);
    cfg.policy_params.vllm_recompute = p.value("vllm_recompute", cfg.policy_params.vllm_recompute);
  }

  if (j.contains("ordering")) {
    const Json& o = j.at("ordering");
    detail::check_keys(o, {"deadline_bounds", "kvc_bounds", "length_bounds"}, "ordering");
    if (o.contains("deadline_bounds"))
      cfg.ordering.deadline_bounds = o.at("deadline_bounds").get<std::vector<Seconds>>();
    if (o.contains("kvc_bounds"))
      cfg.ordering.kvc_bounds = o.at("kvc_bounds").get<std::vector<Tokens>>();
    if (o.contains("length_bounds"))
      cfg.ordering.length_bounds = o.at("length_bounds").get<std::vector<Tokens>>();
  }

  if (j.contains("sweep")) {
    for (auto it = j.at("sweep").begin(); it != j.at("sweep").end(); ++it)
      cfg.sweep[it.key()] = it.value().get<std::vector<double>>();
  }

  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

inline Json to_json(const ExperimentConfig& cfg) {
  Json j;
  j["seed"] = cfg.seed;
  j["slo_scale"] = cfg.slo_scale;
  j["output_dir"] = cfg.output_dir;
  j["jobs"] = cfg.jobs;
  j["policies"] = cfg.policies;
  Json trace;
  if (cfg.trace_file) trace["file"] = *cfg.trace_file;
  if (cfg.synthetic) {
    Json s;
    s["n_requests"] = cfg.synthetic->n_requests;
    s["arrival_rate"] = cfg.synthetic->arrival_rate;
    s["seed"] = cfg.synthetic->seed;
    s["prompt"] = detail::length_dist_json(cfg.synthetic->prompt_dist);
    s["response"] = detail::length_dist_json(cfg.synthetic->rl_dist);
    trace["synthetic"] = s;
  }
  j["trace"] = trace;
  j["kvc"] = {{"capacity", cfg.kvc.capacity}, {"block_size", cfg.kvc.block_size}};
  j["cost"] = {{"t_base", cfg.cost.t_base},
               {"t_token", cfg.cost.t_token},
               {"t_token_over", cfg.cost.t_token_over},
               {"preempt_offload_penalty", cfg.cost.preempt_offload_penalty},
               {"preempt_free_penalty", cfg.cost.preempt_free_penalty},
               {"reserve_penalty", cfg.cost.reserve_penalty},
               {"sched_cost_per_exam", cfg.cost.sched_cost_per_exam},
               {"swap_stall", cfg.cost.swap_stall}};
  const char* model = cfg.predictor.model == ErrorModel::Oracle      ? "oracle"
                      : cfg.predictor.model == ErrorModel::Lognormal ? "lognormal"
                                                                     : "bucket";
  j["predictor"] = {{"model", model},
                    {"sigma", cfg.predictor.sigma},
                    {"accuracy", cfg.predictor.accuracy},
                    {"tolerance", cfg.predictor.tolerance},
                    {"padding_ratio", cfg.predictor.padding_ratio},
                    {"quantum", cfg.predictor.quantum},
                    {"seed", cfg.predictor.seed}};
  j["policy_params"] = {{"tfs", cfg.policy_params.tfs},
                        {"batch_size_cap", cfg.policy_params.batch_size_cap},
                        {"chunk_size", cfg.policy_params.chunk_size},
                        {"reserved_fraction", cfg.policy_params.reserved_fraction},
                        {"buffer_ratio", cfg.policy_params.buffer_ratio},
                        {"max_output_len", cfg.policy_params.max_output_len},
                        {"vllm_recompute", cfg.policy_params.vllm_recompute}};
  j["ordering"] = {{"deadline_bounds", cfg.ordering.deadline_bounds},
                   {"kvc_bounds", cfg.ordering.kvc_bounds},
                   {"length_bounds", cfg.ordering.length_bounds}};
  if (!cfg.sweep.empty()) {
    Json s;
    for (const auto& [axis, values] : cfg.sweep) s[axis] = values;
    j["sweep"] = s;
  }
  return j;
}

// ECONOSIM_SEED overrides every seed the config carries.
inline void apply_seed_override(ExperimentConfig& cfg) {
  const char* env = std::getenv("ECONOSIM_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') throw ConfigError("ECONOSIM_SEED is not an integer");
  cfg.seed = v;
  cfg.predictor.seed = v;
  if (cfg.synthetic) cfg.synthetic->seed = v;
}

inline Trace materialize_trace(const ExperimentConfig& cfg) {
  if (cfg.trace_file) return load_trace_csv(*cfg.trace_file);
  return generate_synthetic(*cfg.synthetic);
}

inline EngineOptions engine_options(const ExperimentConfig& cfg, PolicyKind kind) {
  EngineOptions o;
  o.policy = cfg.policy_params;
  o.policy.kind = kind;
  o.policy.padding_ratio = cfg.predictor.padding_ratio;
  o.cost = cfg.cost;
  o.cost.tfs = cfg.policy_params.tfs;
  o.predictor = cfg.predictor;
  o.ordering = cfg.ordering;
  o.kvc = cfg.kvc;
  o.slo_scale = cfg.slo_scale;
  o.seed = cfg.seed;
  return o;
}

// Runs every configured policy on the shared trace.
inline std::map<std::string, MetricsReport> run_experiment(const ExperimentConfig& cfg) {
  const Trace trace = materialize_trace(cfg);
  std::map<std::string, MetricsReport> out;
  for (const std::string& name : cfg.policies) {
    const PolicyKind kind = parse_policy(name);
    MetricsReport rep = run(trace, engine_options(cfg, kind));
    rep.config_echo = to_json(cfg);
    out[name] = std::move(rep);
  }
  return out;
}

}  // namespace econosim
