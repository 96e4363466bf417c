#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "econosim/common.hpp"

namespace econosim {

struct TraceRecord {
  Seconds arrival_time = 0.0;
  Tokens prompt_len = 1;
  Tokens true_rl = 1;

  bool operator==(const TraceRecord&) const = default;
};

using Trace = std::vector<TraceRecord>;

// Integer length model: lognormal pinned to a target mean, rejection-clamped
// to [min_value, max_value].
struct LengthDist {
  double mean = 32.0;
  Tokens min_value = 1;
  Tokens max_value = 1024;
  double sigma = 0.8;  // log-space spread
};

struct SyntheticTraceSpec {
  int n_requests = 1000;
  double arrival_rate = 1.0;  // requests per second, Poisson arrivals
  LengthDist prompt_dist{19.31, 9, 2470, 0.8};
  LengthDist rl_dist{58.41, 13, 292, 0.8};
  std::uint64_t seed = 1;
};

namespace detail {

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Mean of a lognormal(mu, sigma) truncated to [a, b].
inline double truncated_lognormal_mean(double mu, double sigma, double a, double b) {
  const double alpha = (std::log(a) - mu) / sigma;
  const double beta = (std::log(b) - mu) / sigma;
  const double mass = std_normal_cdf(beta) - std_normal_cdf(alpha);
  if (mass <= 0.0) return a;
  const double num = std_normal_cdf(beta - sigma) - std_normal_cdf(alpha - sigma);
  return std::exp(mu + 0.5 * sigma * sigma) * num / mass;
}

// Solves for the log-space location so the truncated mean hits dist.mean.
inline double fit_lognormal_mu(const LengthDist& dist) {
  const double a = static_cast<double>(dist.min_value);
  const double b = static_cast<double>(dist.max_value);
  double lo = std::log(a) - 10.0;
  double hi = std::log(b) + 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (truncated_lognormal_mean(mid, dist.sigma, a, b) < dist.mean)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

class LengthSampler {
 public:
  explicit LengthSampler(const LengthDist& dist) : dist_(dist) {
    if (dist.min_value < 1 || dist.max_value < dist.min_value)
      throw ConfigError("length distribution bounds invalid: min=" +
                        std::to_string(dist.min_value) + " max=" + std::to_string(dist.max_value));
    if (dist.sigma <= 0.0) throw ConfigError("length distribution sigma must be > 0");
    if (dist.mean < static_cast<double>(dist.min_value) ||
        dist.mean > static_cast<double>(dist.max_value))
      throw ConfigError("length distribution mean outside [min, max]");
    mu_ = detail::fit_lognormal_mu(dist);
  }

  Tokens sample(Rng& rng) const {
    if (dist_.min_value == dist_.max_value) return dist_.min_value;
    std::lognormal_distribution<double> d(mu_, dist_.sigma);
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const Tokens v = static_cast<Tokens>(std::llround(d(rng)));
      if (v >= dist_.min_value && v <= dist_.max_value) return v;
    }
    // Pathological parameterizations land here; clamp rather than spin.
    return std::clamp<Tokens>(static_cast<Tokens>(std::llround(std::exp(mu_))),
                              dist_.min_value, dist_.max_value);
  }

 private:
  LengthDist dist_;
  double mu_ = 0.0;
};

inline Trace generate_synthetic(const SyntheticTraceSpec& spec) {
  if (spec.n_requests < 1) throw ConfigError("n_requests must be >= 1");
  if (!(spec.arrival_rate > 0.0)) throw ConfigError("arrival_rate must be > 0");
  LengthSampler prompt_sampler(spec.prompt_dist);
  LengthSampler rl_sampler(spec.rl_dist);

  Rng rng(spec.seed);
  std::exponential_distribution<double> gap(spec.arrival_rate);

  Trace trace;
  trace.reserve(static_cast<std::size_t>(spec.n_requests));
  Seconds clock = 0.0;
  for (int i = 0; i < spec.n_requests; ++i) {
    clock += gap(rng);
    TraceRecord rec;
    rec.arrival_time = clock;
    rec.prompt_len = prompt_sampler.sample(rng);
    rec.true_rl = rl_sampler.sample(rng);
    trace.push_back(rec);
  }
  return trace;
}

inline void write_trace_csv(std::ostream& out, const Trace& trace) {
  out << "arrival_time,prompt_len,response_len\n";
  char buf[64];
  for (const TraceRecord& rec : trace) {
    std::snprintf(buf, sizeof(buf), "%.17g", rec.arrival_time);
    out << buf << ',' << rec.prompt_len << ',' << rec.true_rl << '\n';
  }
}

inline void write_trace_csv(const std::string& path, const Trace& trace) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open trace file for writing: " + path);
  write_trace_csv(out, trace);
}

inline Trace load_trace_csv(std::istream& in, const std::string& name = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(name + ": empty trace file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "arrival_time,prompt_len,response_len")
    throw ConfigError(name + ": bad header, expected arrival_time,prompt_len,response_len");

  Trace trace;
  int line_no = 1;
  Seconds prev_arrival = -1.0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    TraceRecord rec;
    std::size_t c1 = line.find(',');
    std::size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw ConfigError(name + ": line " + std::to_string(line_no) + ": expected 3 fields");
    try {
      std::size_t pos = 0;
      const std::string f0 = line.substr(0, c1);
      rec.arrival_time = std::stod(f0, &pos);
      if (pos != f0.size()) throw std::invalid_argument("trailing");
      const std::string f1 = line.substr(c1 + 1, c2 - c1 - 1);
      rec.prompt_len = std::stoll(f1, &pos);
      if (pos != f1.size()) throw std::invalid_argument("trailing");
      const std::string f2 = line.substr(c2 + 1);
      rec.true_rl = std::stoll(f2, &pos);
      if (pos != f2.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError(name + ": line " + std::to_string(line_no) + ": malformed row: " + line);
    }
    if (rec.prompt_len < 1)
      throw ConfigError(name + ": line " + std::to_string(line_no) + ": prompt_len must be >= 1");
    if (rec.true_rl < 1)
      throw ConfigError(name + ": line " + std::to_string(line_no) + ": response_len must be >= 1");
    if (rec.arrival_time < 0.0)
      throw ConfigError(name + ": line " + std::to_string(line_no) + ": negative arrival_time");
    if (rec.arrival_time < prev_arrival)
      throw ConfigError(name + ": line " + std::to_string(line_no) +
                        ": arrival_time decreases within the trace");
    prev_arrival = rec.arrival_time;
    trace.push_back(rec);
  }
  return trace;
}

inline Trace load_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace file: " + path);
  return load_trace_csv(in, path);
}

// ---------------------------------------------------------------------------
// Response-length predictor
// ---------------------------------------------------------------------------

enum class ErrorModel { Oracle, Lognormal, BucketAccuracy };

struct PredictorConfig {
  ErrorModel model = ErrorModel::Oracle;
  double sigma = 0.0;       // lognormal: log-space stddev of the multiplicative error
  double accuracy = 1.0;    // bucket: probability the prediction lands inside the band
  double tolerance = 0.1;   // bucket: band half-width, relative to the true value
  double padding_ratio = 0.0;
  Tokens quantum = 1;       // predictions round up to a multiple of this
  std::uint64_t seed = 1;

  void validate() const {
    if (sigma < 0.0) throw ConfigError("predictor sigma must be >= 0");
    if (accuracy < 0.0 || accuracy > 1.0) throw ConfigError("predictor accuracy must be in [0,1]");
    if (tolerance < 0.0) throw ConfigError("predictor tolerance must be >= 0");
    if (padding_ratio < 0.0) throw ConfigError("padding_ratio must be >= 0");
    if (quantum < 1) throw ConfigError("predictor quantum must be >= 1");
  }
};

namespace detail {
inline Tokens quantize_up(Tokens v, Tokens quantum) {
  return quantum <= 1 ? v : block_round(v, quantum);
}
}  // namespace detail

// Classifier-style predictors emit clustered values; `quantum` rounds the
// prediction up to its bucket representative.
inline Tokens predict_rl(Tokens true_rl, const PredictorConfig& cfg, Rng& rng) {
  switch (cfg.model) {
    case ErrorModel::Oracle:
      return detail::quantize_up(true_rl, cfg.quantum);
    case ErrorModel::Lognormal: {
      std::normal_distribution<double> n(0.0, cfg.sigma);
      const double v = static_cast<double>(true_rl) * std::exp(n(rng));
      return detail::quantize_up(std::max<Tokens>(1, static_cast<Tokens>(std::llround(v))),
                                 cfg.quantum);
    }
    case ErrorModel::BucketAccuracy: {
      const double t = static_cast<double>(true_rl);
      const Tokens lo_in = std::max<Tokens>(1, ceil_tokens(t * (1.0 - cfg.tolerance)));
      const Tokens hi_in = static_cast<Tokens>(std::floor(t * (1.0 + cfg.tolerance) + 1e-9));
      std::bernoulli_distribution hit(cfg.accuracy);
      if (hit(rng)) {
        std::uniform_int_distribution<Tokens> inside(lo_in, std::max(lo_in, hi_in));
        return detail::quantize_up(inside(rng), cfg.quantum);
      }
      // Miss: land strictly outside the band, preferring the requested side.
      std::bernoulli_distribution above(0.5);
      std::uniform_real_distribution<double> mag(cfg.tolerance, 2.0 * cfg.tolerance + 0.25);
      const double u = mag(rng);
      Tokens v;
      if (above(rng)) {
        v = static_cast<Tokens>(std::llround(t * (1.0 + u)));
        if (v <= hi_in) v = hi_in + 1;
      } else {
        v = static_cast<Tokens>(std::llround(t * (1.0 - u)));
        if (v >= lo_in) v = lo_in - 1;
        if (v < 1) v = hi_in + 1;  // no room below the band
      }
      return detail::quantize_up(std::max<Tokens>(1, v), cfg.quantum);
    }
  }
  return true_rl;
}

inline Tokens apply_padding(Tokens predicted_rl, double ratio) {
  return ceil_tokens(static_cast<double>(predicted_rl) * (1.0 + ratio));
}

}  // namespace econosim
