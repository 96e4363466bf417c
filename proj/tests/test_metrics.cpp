#include <catch2/catch_amalgamated.hpp>

#include "econosim/metrics.hpp"

using namespace econosim;

namespace {

RequestRecord rec(RequestId id, Seconds arrival, Seconds completion, Tokens rl, bool met,
                  Seconds first_token = -1.0) {
  RequestRecord r;
  r.id = id;
  r.arrival = arrival;
  r.completion_time = completion;
  r.true_rl = rl;
  r.met_slo = met;
  r.first_token_time = first_token;
  return r;
}

}  // namespace

TEST_CASE("single request normalized latency") {
  std::vector<RequestRecord> records = {rec(0, 0.0, 2.0, 100, true, 0.5)};
  std::vector<IterationSample> samples;
  IterationSample s;
  s.iter = 1;
  s.dt = 2.0;
  s.forward_size = 100;
  samples.push_back(s);
  MetricsReport r = aggregate(records, samples, 1024);
  CHECK(r.normalized_latency == Catch::Approx(0.02));
  CHECK(r.mean_jct == Catch::Approx(2.0));
  CHECK(r.ssr == 1.0);
}

TEST_CASE("all requests meeting SLO gives goodput == throughput") {
  std::vector<RequestRecord> records = {rec(0, 0.0, 1.0, 10, true), rec(1, 0.2, 2.0, 20, true),
                                        rec(2, 0.4, 4.0, 30, true)};
  MetricsReport r = aggregate(records, {}, 1024);
  CHECK(r.ssr == 1.0);
  CHECK(r.goodput_rps == Catch::Approx(r.throughput_rps));
}

TEST_CASE("three-request aggregates match the hand-computed sheet") {
  // jct: 2.0, 1.5, 4.0 ; tokens: 100, 50, 200 ; met: yes, no, yes
  std::vector<RequestRecord> records = {rec(0, 1.0, 3.0, 100, true, 1.5),
                                        rec(1, 2.0, 3.5, 50, false, 2.5),
                                        rec(2, 4.0, 8.0, 200, true, 5.0)};
  MetricsReport r = aggregate(records, {}, 1024);
  CHECK(r.mean_jct == Catch::Approx((2.0 + 1.5 + 4.0) / 3.0));
  // linear-interpolated percentiles over sorted {1.5, 2.0, 4.0}
  CHECK(r.p5_jct == Catch::Approx(1.5 + 0.1 * 0.5));
  CHECK(r.p95_jct == Catch::Approx(2.0 + 0.9 * 2.0));
  CHECK(r.ssr == Catch::Approx(2.0 / 3.0));
  // makespan 8.0: throughput 3/8 rps, (100+50+200)/8 tps, goodput 2/8
  CHECK(r.throughput_rps == Catch::Approx(3.0 / 8.0));
  CHECK(r.throughput_tps == Catch::Approx(350.0 / 8.0));
  CHECK(r.goodput_rps == Catch::Approx(2.0 / 8.0));
  // normalized latency: mean of {2/100, 1.5/50, 4/200}
  CHECK(r.normalized_latency == Catch::Approx((0.02 + 0.03 + 0.02) / 3.0));
  // TBT: (completion - first_token)/(rl - 1)
  const double tbt = ((3.0 - 1.5) / 99 + (3.5 - 2.5) / 49 + (8.0 - 5.0) / 199) / 3.0;
  CHECK(r.mean_tbt == Catch::Approx(tbt));
  // token-count identity: tokens/s * makespan == total tokens
  CHECK(r.throughput_tps * r.makespan == Catch::Approx(350.0));
}

TEST_CASE("aggregate rejects empty input") {
  CHECK_THROWS_AS(aggregate({}, {}, 1024), SimulationError);
}

TEST_CASE("iteration-weighted means skip idle stretches") {
  std::vector<RequestRecord> records = {rec(0, 0.0, 1.0, 10, true)};
  std::vector<IterationSample> samples;
  IterationSample a;
  a.forward_size = 100;
  a.kvc_written_frac = 0.5;
  a.completed = 1;
  samples.push_back(a);
  IterationSample idle;
  idle.idle_repeat = 50;
  samples.push_back(idle);
  IterationSample b;
  b.forward_size = 300;
  b.kvc_written_frac = 0.7;
  samples.push_back(b);
  MetricsReport r = aggregate(records, samples, 1024);
  CHECK(r.iterations == 2);
  CHECK(r.mean_forward_size == Catch::Approx(200.0));
  CHECK(r.mean_kvc_written == Catch::Approx(0.6));
  CHECK(r.iteration_completion_histogram.at(1) == Catch::Approx(0.5));
  CHECK(r.iteration_completion_histogram.at(0) == Catch::Approx(0.5));
}

TEST_CASE("comparison table needs matching traces and a present baseline") {
  MetricsReport a = aggregate({rec(0, 0.0, 1.0, 10, true)}, {}, 1024);
  a.policy = "vllm";
  a.trace_hash = 42;
  MetricsReport b = a;
  b.policy = "econoserve-full";

  std::map<std::string, MetricsReport> reports = {{"vllm", a}, {"econoserve-full", b}};
  ComparisonTable t = compare(reports, "vllm");
  CHECK(t.values.at("mean_jct").at("econoserve-full") == Catch::Approx(a.mean_jct));

  SECTION("self comparison gives unit ratios") {
    for (const auto& [metric, row] : t.ratios)
      for (const auto& [policy, ratio] : row)
        if (t.values.at(metric).at("vllm") != 0.0) CHECK(ratio == Catch::Approx(1.0));
  }

  SECTION("hash mismatch is an error") {
    reports["econoserve-full"].trace_hash = 43;
    CHECK_THROWS_AS(compare(reports, "vllm"), ConfigError);
  }

  SECTION("absent baseline is an error") {
    CHECK_THROWS_AS(compare(reports, "orca"), ConfigError);
  }

  SECTION("fewer than two reports is an error") {
    std::map<std::string, MetricsReport> one = {{"vllm", a}};
    CHECK_THROWS_AS(compare(one, "vllm"), ConfigError);
  }
}

TEST_CASE("three-policy ratios recompute from raw aggregates") {
  MetricsReport a = aggregate({rec(0, 0.0, 1.0, 10, true)}, {}, 1024);
  a.policy = "vllm";
  a.trace_hash = 7;
  MetricsReport b = a;
  b.policy = "orca";
  b.mean_jct = 2.0 * a.mean_jct;
  MetricsReport c = a;
  c.policy = "econoserve-full";
  c.mean_jct = 0.5 * a.mean_jct;
  std::map<std::string, MetricsReport> reports = {
      {"vllm", a}, {"orca", b}, {"econoserve-full", c}};
  ComparisonTable t = compare(reports, "vllm");
  CHECK(t.ratios.at("mean_jct").at("orca") == Catch::Approx(2.0));
  CHECK(t.ratios.at("mean_jct").at("econoserve-full") == Catch::Approx(0.5));
  const std::string table = render_table(t);
  CHECK(table.find("mean_jct") != std::string::npos);
  CHECK(table.find("orca") != std::string::npos);
}
