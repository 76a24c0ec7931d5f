#pragma once

#include <algorithm>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "muxsim/cost_model.hpp"
#include "muxsim/gpu_model.hpp"
#include "muxsim/sim_core.hpp"
#include "muxsim/truth.hpp"
#include "muxsim/workload.hpp"

namespace muxsim {

struct SloTargets {
  SimTime tbt_slo_us = 100 * kMsUs;
  SimTime ttft_slo_us = 5 * kSecUs;
  double percentile = 99.0;
};

// Everything a scheduler run needs besides the trace. `truth` drives the
// simulated hardware; schedulers decide with `coeffs` and `guard` only.
struct ServingSetup {
  GpuSpec gpu;
  ModelSpec model;
  TruthModel truth;
  LatencyCoeffs coeffs;
  ContentionGuard guard;
  SloTargets slo;
  std::uint64_t seed = 1;
  bool record_events = true;
  // Stop this long after the last arrival even if work remains; 0 = run dry.
  SimTime drain_horizon_us = 0;
};

// Builds a setup whose coefficients and guard are exact copies of the truth.
ServingSetup exact_setup(const GpuSpec& gpu, const TruthModel& truth);

enum class Side : std::uint8_t { Decode, Prefill };
std::string_view to_string(Side side);

struct BusyInterval {
  Side side = Side::Decode;
  SimTime start = 0;
  SimTime end = 0;
  double share = 0;  // fraction of the whole system's SMs
};

struct DecisionRecord {
  SimTime time = 0;
  std::string kind;
  std::vector<std::pair<std::string, std::int64_t>> fields;
};

struct IterationRecord {
  SimTime start = 0;
  SimTime end = 0;
  std::int64_t bs = 0;
  int decode_sms = 0;
  SimTime predicted_us = 0;
  SimTime worst_us = 0;
  bool feasible = true;  // best-fit found a config meeting the SLO
  bool corun = false;
  double true_factor = 1.0;
  double guard_factor = 1.0;
  double truth_cell_max = 1.0;
};

// An interval with the prefill side idle. work_since is the first instant in
// it when prefill work was pending (-1 if never).
struct IdleRecord {
  SimTime start = 0;
  SimTime end = 0;
  SimTime work_since = -1;
  bool stalled = false;  // pending work blocked by the KV pool
};

struct RequestOutcome {
  SimTime release = -1;
  SimTime first_token = -1;
  SimTime prefill_done = -1;
  SimTime merged = -1;
  SimTime finish = -1;
  std::vector<SimTime> token_times;
  Tokens hit_tokens = 0;
  Tokens prefill_tokens = 0;  // tokens actually recomputed
  int layers_done = 0;
  bool preempted = false;
};

struct RunResult {
  std::string scheduler;
  std::vector<RequestOutcome> requests;
  std::vector<BusyInterval> busy;
  std::vector<DecisionRecord> decisions;
  std::vector<EventRecord> events;
  std::vector<IterationRecord> iterations;
  std::vector<IdleRecord> idle;
  CacheStats cache;
  std::size_t infeasible_iterations = 0;
  std::size_t preemptions = 0;
  std::size_t max_suspended = 0;
  bool preemptor_preempted = false;
  SimTime end_time = 0;
  SimTime last_arrival = 0;
  std::size_t pending_at_last_arrival = 0;
  std::size_t arrivals_final_window = 0;
  int n_layers = 0;
};

// Collects per-request tokens and the decision/busy streams.
class Recorder {
 public:
  Recorder(const Trace& trace, bool record_events);

  RunResult& result() { return result_; }
  bool enabled() const { return record_; }

  void decision(SimTime t, std::string kind, std::vector<std::pair<std::string, std::int64_t>> fields = {});
  void busy(Side side, SimTime start, SimTime end, double share);
  void token(std::size_t request, SimTime t);
  void finish(std::size_t request, SimTime t);

  // Stable-run bookkeeping; call once the simulation is over.
  void finalize(const Trace& trace, const Simulator& sim, const CacheStats& cache);

 private:
  const Trace& trace_;
  RunResult result_;
  bool record_;
};

// Releases turn k+1 of a session only once turn k has finished.
class SessionGate {
 public:
  explicit SessionGate(const Trace& trace);

  // On arrival: true if the request may be released now.
  bool on_arrival(std::size_t request);
  // On finish: the next turn of the session if it arrived and waits.
  std::optional<std::size_t> on_finish(std::size_t request);

 private:
  const Trace& trace_;
  std::vector<bool> finished_;
  std::vector<bool> waiting_;
};

// Host-side launch timeline: launches are serialized on the CPU thread.
class HostTimeline {
 public:
  // Returns the instant the launch completes.
  SimTime launch(SimTime now, SimTime cost) {
    free_at_ = std::max(free_at_, now) + cost;
    return free_at_;
  }
  SimTime free_at() const { return free_at_; }

 private:
  SimTime free_at_ = 0;
};

// Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample. Throws
// EmptySamples on an empty input; p must lie in (0, 100].
double percentile(std::vector<double> samples, double p);

// Gaps between consecutive tokens of every request, in us.
std::vector<double> tbt_samples(const RunResult& result);

// One line per record: events, busy intervals and decisions, tagged by type.
void write_run_log(std::ostream& out, const RunResult& result);

}  // namespace muxsim
