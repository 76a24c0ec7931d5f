#include "muxsim/serving.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "muxsim/errors.hpp"

namespace muxsim {

ServingSetup exact_setup(const GpuSpec& gpu, const TruthModel& truth) {
  ServingSetup s;
  s.gpu = gpu;
  s.truth = truth;
  s.truth.total_sms = gpu.total_sms;
  s.truth.device_count = gpu.device_count;
  const auto parts = decode_partitions(gpu);
  s.coeffs = s.truth.exact_coeffs(parts);
  s.guard = s.truth.exact_guard(default_guard_axes(parts));
  return s;
}

std::string_view to_string(Side side) { return side == Side::Decode ? "decode" : "prefill"; }

Recorder::Recorder(const Trace& trace, bool record_events) : trace_(trace), record_(record_events) {
  result_.requests.resize(trace.requests.size());
}

void Recorder::decision(SimTime t, std::string kind,
                        std::vector<std::pair<std::string, std::int64_t>> fields) {
  if (!record_) return;
  result_.decisions.push_back({t, std::move(kind), std::move(fields)});
}

void Recorder::busy(Side side, SimTime start, SimTime end, double share) {
  if (end <= start) return;
  result_.busy.push_back({side, start, end, share});
}

void Recorder::token(std::size_t request, SimTime t) {
  auto& r = result_.requests[request];
  if (r.token_times.empty()) r.first_token = t;
  r.token_times.push_back(t);
}

void Recorder::finish(std::size_t request, SimTime t) { result_.requests[request].finish = t; }

void Recorder::finalize(const Trace& trace, const Simulator& sim, const CacheStats& cache) {
  result_.cache = cache;
  result_.end_time = sim.now();
  if (record_) result_.events = sim.log();
  if (trace.requests.empty()) return;
  SimTime first = trace.requests.front().arrival;
  SimTime last = first;
  for (const auto& r : trace.requests) {
    first = std::min(first, r.arrival);
    last = std::max(last, r.arrival);
  }
  result_.last_arrival = last;
  const SimTime window_start = first + (last - first) * 9 / 10;
  for (std::size_t i = 0; i < trace.requests.size(); ++i) {
    const auto& out = result_.requests[i];
    if (out.finish < 0 || out.finish > last) ++result_.pending_at_last_arrival;
    if (trace.requests[i].arrival >= window_start) ++result_.arrivals_final_window;
  }
}

SessionGate::SessionGate(const Trace& trace)
    : trace_(trace), finished_(trace.requests.size(), false), waiting_(trace.requests.size(), false) {}

bool SessionGate::on_arrival(std::size_t request) {
  const auto prev = trace_.previous_turn(request);
  if (prev && !finished_[*prev]) {
    waiting_[request] = true;
    return false;
  }
  return true;
}

std::optional<std::size_t> SessionGate::on_finish(std::size_t request) {
  finished_[request] = true;
  const auto& req = trace_.requests[request];
  if (req.session < 0) return std::nullopt;
  const auto& turns = trace_.sessions[static_cast<std::size_t>(req.session)].turns;
  const auto pos = static_cast<std::size_t>(req.turn) + 1;
  if (pos >= turns.size()) return std::nullopt;
  const std::size_t next = turns[pos];
  if (!waiting_[next]) return std::nullopt;
  waiting_[next] = false;
  return next;
}

double percentile(std::vector<double> samples, double p) {
  if (samples.empty()) throw EmptySamples("percentile of an empty sample set");
  if (!(p > 0) || p > 100) throw ConfigError("percentile p must lie in (0, 100]");
  const auto n = samples.size();
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(rank - 1), samples.end());
  return samples[rank - 1];
}

std::vector<double> tbt_samples(const RunResult& result) {
  std::vector<double> out;
  for (const auto& r : result.requests) {
    for (std::size_t k = 1; k < r.token_times.size(); ++k) {
      out.push_back(static_cast<double>(r.token_times[k] - r.token_times[k - 1]));
    }
  }
  return out;
}

void write_run_log(std::ostream& out, const RunResult& result) {
  write_event_log(out, result.events);
  for (const auto& b : result.busy) {
    nlohmann::ordered_json j;
    j["type"] = "busy";
    j["side"] = to_string(b.side);
    j["start_us"] = b.start;
    j["end_us"] = b.end;
    j["share"] = b.share;
    out << j.dump() << '\n';
  }
  for (const auto& d : result.decisions) {
    nlohmann::ordered_json j;
    j["type"] = "decision";
    j["time_us"] = d.time;
    j["kind"] = d.kind;
    for (const auto& [k, v] : d.fields) j[k] = v;
    out << j.dump() << '\n';
  }
}

}  // namespace muxsim
