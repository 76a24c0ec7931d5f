#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "muxsim/baselines.hpp"
#include "muxsim/mux_scheduler.hpp"
#include "muxsim/serving.hpp"
#include "muxsim/workload.hpp"

namespace muxsim {

enum class SchedulerKind : std::uint8_t { Mux, Chunked, StaticPd, Elastic };
std::string_view to_string(SchedulerKind kind);
SchedulerKind scheduler_from_string(std::string_view name);

struct SchedulerParams {
  SchedulerKind kind = SchedulerKind::Mux;
  MuxParams mux;
  ChunkedConfig chunked;
  DisaggConfig disagg;
  ElasticConfig elastic;
};

struct WorkloadConfig {
  // A task preset name, or "a+b" for an even mix of two presets.
  std::string task = "tool_agent";
  double rate_per_s = 1.0;
  SimTime duration_us = 600 * kSecUs;
  std::uint64_t seed = 1;
  double ttft_slo_per_token_us = 0.0;
  std::optional<std::string> trace_path;
};

struct GuardOptions {
  double cap = 1.3;
  bool cap_override = true;
  DecodeKey key = DecodeKey::MaxReused;
};

struct RunConfig {
  GpuSpec gpu;
  ModelSpec model;
  SloTargets slo;
  TruthModel truth;
  GuardOptions guard;
  std::optional<std::string> calibration_path;  // exact truth calibration if absent
  SchedulerParams scheduler;
  WorkloadConfig workload;
  SimTime drain_horizon_us = 0;
};

RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::string& path);
void write_run_config(std::ostream& out, const RunConfig& cfg);

// Calibration per the config: the calibration file if given, otherwise the
// truth's exact coefficients and guard.
ServingSetup make_setup(const RunConfig& cfg, std::uint64_t seed);
Trace make_trace(const WorkloadConfig& w, const SloTargets& slo);
Trace make_trace(const WorkloadConfig& w, const SloTargets& slo, double rate, std::uint64_t seed);

RunResult run_simulation(const Trace& trace, const ServingSetup& setup, const SchedulerParams& params);

// ---------------------------------------------------------------------------
// Metrics

struct LatencySummary {
  double p50 = 0;
  double p99 = 0;
  double avg = 0;
  std::size_t count = 0;
};
LatencySummary summarize(const std::vector<double>& samples, double tail = 99.0);

struct MetricsReport {
  std::string scheduler;
  std::size_t requests = 0;
  std::size_t completed = 0;
  std::size_t tokens_emitted = 0;
  LatencySummary ttft;
  LatencySummary tbt;
  LatencySummary tpot;
  LatencySummary e2e;
  LatencySummary ttft_per_token;
  LatencySummary decode_gap;
  double ttft_attainment = 0;  // requests with TTFT within their SLO
  double tbt_attainment = 0;   // TBT samples within the SLO
  double slo_attainment = 0;   // requests meeting both
  CacheStats cache;
  std::size_t infeasible_iterations = 0;
  bool saturated = false;
  bool unstable = false;
  double bubble_decode = 0;
  double bubble_prefill = 0;
  double bubble_mean = 0;
  double utilization = 0;
  Tokens prefill_tokens = 0;
  std::size_t preemptions = 0;
};

MetricsReport compute_metrics(const RunResult& result, const Trace& trace, const SloTargets& slo);
// Pools the samples of several runs (e.g. seeds of one rate) before taking
// percentiles.
MetricsReport compute_metrics(std::span<const std::pair<const RunResult*, const Trace*>> runs,
                              const SloTargets& slo);

// Idle fraction within [first busy, last busy] of the union of intervals.
double bubble_ratio(std::vector<std::pair<SimTime, SimTime>> intervals);
double bubble_ratio(std::span<const BusyInterval> busy, Side side);
// Busy-time-weighted share of the system's SMs.
double utilization(std::span<const BusyInterval> busy);

// Terminal queue longer than twice the arrivals of the final 10% window.
bool is_unstable(const RunResult& result);

struct CurvePoint {
  double rate = 0;
  double p99_ttft = 0;
  double p99_tbt = 0;
  double attainment = 0;
  bool unstable = false;
  MetricsReport report;
};
using SloAttainmentCurve = std::vector<CurvePoint>;

// Largest rate with P99 TBT within the SLO on a stable run; 0 if none.
double goodput(const SloAttainmentCurve& curve, const SloTargets& slo);

using TraceFactory = std::function<Trace(double rate, std::uint64_t seed)>;
using SetupFactory = std::function<ServingSetup(std::uint64_t seed)>;

// One run per (rate, seed) with samples pooled across seeds; stops after the
// first unstable rate.
SloAttainmentCurve sweep(const TraceFactory& traces, const SetupFactory& setups,
                         const SchedulerParams& params, std::span<const double> rates,
                         std::span<const std::uint64_t> seeds);
SloAttainmentCurve sweep(const RunConfig& cfg, std::span<const double> rates,
                         std::span<const std::uint64_t> seeds);

// ---------------------------------------------------------------------------
// Output files

void write_request_metrics(std::ostream& out, const RunResult& result, const Trace& trace);
void write_summary_header(std::ostream& out);
void write_summary_row(std::ostream& out, const MetricsReport& m, double rate, std::uint64_t seed);
void write_curve_csv(std::ostream& out, const SloAttainmentCurve& curve);

struct LogAnalysis {
  double bubble_decode = 0;
  double bubble_prefill = 0;
  double bubble_mean = 0;
  std::size_t events = 0;
  std::size_t decisions = 0;
};

// Reads a run log; optionally writes the decision timeline as CSV.
LogAnalysis analyze_log(std::istream& in, std::ostream* timeline_csv);

}  // namespace muxsim
