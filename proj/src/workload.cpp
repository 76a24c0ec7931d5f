#include "muxsim/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "muxsim/errors.hpp"

namespace muxsim {

std::optional<std::size_t> Trace::previous_turn(std::size_t request) const {
  const Request& req = requests[request];
  if (req.session < 0 || req.turn == 0) return std::nullopt;
  return sessions[static_cast<std::size_t>(req.session)].turns[static_cast<std::size_t>(req.turn - 1)];
}

// ---------------------------------------------------------------------------
// Length sampling

namespace {

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double clamped_lognormal_mean(double mu, double sigma, double lo, double hi) {
  const double a = (std::log(lo) - mu) / sigma;
  const double b = (std::log(hi) - mu) / sigma;
  const double body = std::exp(mu + 0.5 * sigma * sigma) *
                      (std_normal_cdf(b - sigma) - std_normal_cdf(a - sigma));
  return lo * std_normal_cdf(a) + hi * (1.0 - std_normal_cdf(b)) + body;
}

}  // namespace

ClampedLogNormal::ClampedLogNormal(const LengthDist& dist) : dist_(dist) {
  if (!(dist.min <= dist.mean && dist.mean <= dist.max) || dist.min <= 0) {
    throw ConfigError("length distribution needs 0 < min <= mean <= max");
  }
  if (dist.max <= dist.min || dist.mean <= dist.min || dist.mean >= dist.max) {
    constant_ = true;
    mu_ = std::log(dist.mean);
    return;
  }
  sigma_ = std::log(dist.max / dist.mean) / 3.0;
  // The clamped mean is increasing in mu; bisect for the target.
  double lo = std::log(dist.min) - 10.0 * sigma_;
  double hi = std::log(dist.max) + 10.0 * sigma_;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (clamped_lognormal_mean(mid, sigma_, dist.min, dist.max) < dist.mean) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  mu_ = 0.5 * (lo + hi);
}

double ClampedLogNormal::analytic_mean() const {
  if (constant_) return dist_.mean;
  return clamped_lognormal_mean(mu_, sigma_, dist_.min, dist_.max);
}

Tokens ClampedLogNormal::sample(std::mt19937_64& rng) const {
  if (constant_) return static_cast<Tokens>(std::llround(dist_.mean));
  std::normal_distribution<double> normal(mu_, sigma_);
  const double x = std::clamp(std::exp(normal(rng)), dist_.min, dist_.max);
  return static_cast<Tokens>(std::llround(x));
}

// ---------------------------------------------------------------------------
// Task presets

DistSpec task_dist(std::string_view task) {
  if (task == "sharegpt") return {{4, 226, 1024}, {4, 195, 1838}, std::nullopt};
  if (task == "loogle") return {{3380, 30000, 81000}, {2, 15, 326}, std::nullopt};
  if (task == "openthoughts") return {{311, 709, 4633}, {684, 8374, 32000}, LengthDist{243, 243, 243}};
  if (task == "conversation") return {{891, 7538, 123000}, {1, 342, 2000}, LengthDist{0, 4496, 120000}};
  if (task == "tool_agent") return {{891, 8596, 123000}, {1, 182, 2000}, LengthDist{0, 4905, 120000}};
  throw ConfigError("unknown task preset: " + std::string(task));
}

std::optional<MultiTurnSpec> task_multi_turn(std::string_view task) {
  if (task == "conversation" || task == "tool_agent") {
    MultiTurnSpec mt;
    mt.turns = {1, 3.5, 12};
    mt.context_cap = 123000;
    return mt;
  }
  return std::nullopt;
}

std::vector<std::string> task_names() {
  return {"sharegpt", "loogle", "openthoughts", "conversation", "tool_agent"};
}

// ---------------------------------------------------------------------------
// Generation

namespace {

SimTime request_ttft_slo(const TraceSpec& spec, Tokens total_len) {
  return spec.ttft_slo + static_cast<SimTime>(std::llround(spec.ttft_slo_per_token_us *
                                                           static_cast<double>(total_len)));
}

std::vector<SimTime> arrival_times(const TraceSpec& spec, std::uint64_t& seed_out) {
  if (const auto* explicit_times = std::get_if<ExplicitArrivals>(&spec.arrivals)) {
    seed_out = 0;
    std::vector<SimTime> times = explicit_times->times;
    std::stable_sort(times.begin(), times.end());
    return times;
  }
  const auto& poisson = std::get<PoissonArrivals>(spec.arrivals);
  if (!(poisson.rate_per_s > 0)) throw ConfigError("poisson rate must be positive");
  seed_out = poisson.seed;
  std::mt19937_64 rng(poisson.seed);
  // Unit-rate gaps scaled by 1/rate: the same seed gives time-scaled copies of
  // one arrival sequence at every rate.
  std::exponential_distribution<double> unit_gap(1.0);
  std::vector<SimTime> times;
  double t = 0;
  const double scale = 1e6 / poisson.rate_per_s;
  while (true) {
    t += unit_gap(rng) * scale;
    const auto us = static_cast<SimTime>(std::llround(t));
    if (us > poisson.duration) break;
    times.push_back(us);
  }
  return times;
}

struct LengthSampler {
  ClampedLogNormal input;
  ClampedLogNormal output;
  std::optional<ClampedLogNormal> reused;
  std::optional<ClampedLogNormal> fresh;  // per-turn new context for multi-turn

  explicit LengthSampler(const DistSpec& d)
      : input(d.input), output(d.output) {
    // A zero-min reuse distribution describes session context; sessions supply it.
    if (d.reused && d.reused->min > 0) reused.emplace(*d.reused);
    LengthDist f = d.input;
    if (d.reused) f.mean = std::max(f.min, d.input.mean - d.reused->mean);
    fresh.emplace(f);
  }
};

}  // namespace

Trace gen_poisson(const TraceSpec& spec) {
  std::uint64_t arrival_seed = 0;
  const std::vector<SimTime> times = arrival_times(spec, arrival_seed);
  const std::uint64_t length_seed =
      spec.length_seed != 0 ? spec.length_seed : (arrival_seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL);
  std::mt19937_64 len_rng(length_seed);
  std::mt19937_64 session_rng(length_seed ^ 0xD1B54A32D192ED03ULL);

  Trace trace;
  trace.requests.reserve(times.size());

  auto push_request = [&](SimTime at, std::int64_t session, Tokens n_new, Tokens n_reused, Tokens n_out) {
    Request r;
    r.id = "r" + std::to_string(trace.requests.size());
    r.session = session;
    r.session_id = trace.sessions[static_cast<std::size_t>(session)].id;
    r.turn = static_cast<int>(trace.sessions[static_cast<std::size_t>(session)].turns.size());
    r.arrival = at;
    r.n_new = std::max<Tokens>(1, n_new);
    r.n_reused = std::max<Tokens>(0, n_reused);
    r.n_out = std::max<Tokens>(1, n_out);
    r.ttft_slo = request_ttft_slo(spec, r.total_len());
    r.tbt_slo = spec.tbt_slo;
    trace.sessions[static_cast<std::size_t>(session)].turns.push_back(trace.requests.size());
    trace.requests.push_back(std::move(r));
  };
  auto new_session = [&]() {
    Session s;
    s.id = "s" + std::to_string(trace.sessions.size());
    trace.sessions.push_back(std::move(s));
    return static_cast<std::int64_t>(trace.sessions.size() - 1);
  };

  if (const auto* explicit_lengths = std::get_if<ExplicitLengths>(&spec.lengths)) {
    for (std::size_t i = 0; i < times.size(); ++i) {
      const auto& e = explicit_lengths->entries.at(i % explicit_lengths->entries.size());
      push_request(times[i], new_session(), e.n_new, e.n_reused, e.n_out);
      trace.sessions.back().accumulated_context = e.n_reused + e.n_new + e.n_out;
    }
    return trace;
  }

  const auto& dist = std::get<DistSpec>(spec.lengths);
  LengthSampler sampler(dist);

  if (!spec.multi_turn) {
    for (SimTime t : times) {
      const Tokens input = sampler.input.sample(len_rng);
      const Tokens reused = sampler.reused ? std::min(sampler.reused->sample(len_rng), input - 1) : 0;
      const Tokens out = sampler.output.sample(len_rng);
      const auto s = new_session();
      push_request(t, s, input - reused, reused, out);
      trace.sessions.back().accumulated_context = input + out;
    }
    return trace;
  }

  // Multi-turn: every arrival point either continues the session that has been
  // eligible the longest or opens a new one.
  const MultiTurnSpec& mt = *spec.multi_turn;
  const ClampedLogNormal turns_dist(mt.turns);
  const ClampedLogNormal think_dist(mt.think_time_us);
  struct Open {
    SimTime eligible;
    std::int64_t session;
    int turns_left;
    bool operator>(const Open& o) const {
      return eligible != o.eligible ? eligible > o.eligible : session > o.session;
    }
  };
  std::priority_queue<Open, std::vector<Open>, std::greater<>> open;

  for (SimTime t : times) {
    bool placed = false;
    while (!open.empty() && open.top().eligible <= t) {
      Open o = open.top();
      open.pop();
      Session& s = trace.sessions[static_cast<std::size_t>(o.session)];
      const Tokens n_new = sampler.fresh->sample(len_rng);
      const Tokens out = sampler.output.sample(len_rng);
      if (s.accumulated_context + n_new > mt.context_cap) continue;  // session closes
      const Tokens reused = s.accumulated_context;
      push_request(t, o.session, n_new, reused, out);
      Session& s2 = trace.sessions[static_cast<std::size_t>(o.session)];
      s2.accumulated_context = reused + n_new + out;
      if (--o.turns_left > 0) {
        o.eligible = t + think_dist.sample(session_rng);
        open.push(o);
      }
      placed = true;
      break;
    }
    if (placed) continue;
    const auto sid = new_session();
    const int turns = static_cast<int>(std::max<Tokens>(1, turns_dist.sample(session_rng)));
    const Tokens n_new = std::min<Tokens>(sampler.fresh->sample(len_rng), mt.context_cap);
    const Tokens out = sampler.output.sample(len_rng);
    push_request(t, sid, n_new, 0, out);
    trace.sessions.back().accumulated_context = n_new + out;
    if (turns > 1) open.push(Open{t + think_dist.sample(session_rng), sid, turns - 1});
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Trace files

void link_sessions(Trace& trace, ReuseMode mode) {
  trace.sessions.clear();
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < trace.requests.size(); ++i) {
    Request& r = trace.requests[i];
    auto [it, inserted] = index.try_emplace(r.session_id, trace.sessions.size());
    if (inserted) {
      Session s;
      s.id = r.session_id;
      trace.sessions.push_back(std::move(s));
    }
    Session& s = trace.sessions[it->second];
    r.session = static_cast<std::int64_t>(it->second);
    r.turn = static_cast<int>(s.turns.size());
    if (r.turn > 0 && mode == ReuseMode::Reconstruct) r.n_reused = s.accumulated_context;
    s.turns.push_back(i);
    s.accumulated_context = r.n_reused + r.n_new + r.n_out;
  }
}

Trace parse_trace(std::istream& in, ReuseMode mode, SimTime ttft_slo, SimTime tbt_slo) {
  Trace trace;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("line " + std::to_string(line_no) + ": " + e.what());
    }
    Request r;
    try {
      r.id = j.at("id").get<std::string>();
      r.session_id = j.at("session").get<std::string>();
      r.arrival = j.at("arrival_us").get<SimTime>();
      r.n_new = j.at("n_new").get<Tokens>();
      r.n_reused = j.at("n_reused").get<Tokens>();
      r.n_out = j.at("n_out").get<Tokens>();
      r.ttft_slo = j.value("ttft_slo_us", ttft_slo);
      r.tbt_slo = j.value("tbt_slo_us", tbt_slo);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (r.n_new < 1) throw SchemaError("line " + std::to_string(line_no) + ": n_new must be >= 1");
    if (r.n_reused < 0) throw SchemaError("line " + std::to_string(line_no) + ": n_reused must be >= 0");
    if (r.n_out < 1) throw SchemaError("line " + std::to_string(line_no) + ": n_out must be >= 1");
    if (r.arrival < 0) throw SchemaError("line " + std::to_string(line_no) + ": arrival_us must be >= 0");
    trace.requests.push_back(std::move(r));
  }
  std::stable_sort(trace.requests.begin(), trace.requests.end(),
                   [](const Request& a, const Request& b) { return a.arrival < b.arrival; });
  link_sessions(trace, mode);
  return trace;
}

Trace load_trace(const std::string& path, ReuseMode mode, SimTime ttft_slo, SimTime tbt_slo) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open trace file: " + path);
  return parse_trace(in, mode, ttft_slo, tbt_slo);
}

void write_trace(std::ostream& out, const Trace& trace) {
  for (const Request& r : trace.requests) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["session"] = r.session_id;
    j["arrival_us"] = r.arrival;
    j["n_new"] = r.n_new;
    j["n_reused"] = r.n_reused;
    j["n_out"] = r.n_out;
    out << j.dump() << '\n';
  }
}

void save_trace(const std::string& path, const Trace& trace) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write trace file: " + path);
  write_trace(out, trace);
}

TraceStats trace_stats(const std::vector<Request>& requests) {
  if (requests.empty()) throw EmptyTrace("trace_stats on an empty trace");
  TraceStats st;
  st.count = requests.size();
  auto init = [](FieldStats& f, double v) { f.min = f.max = v; f.mean = 0; };
  init(st.input, static_cast<double>(requests[0].total_len()));
  init(st.output, static_cast<double>(requests[0].n_out));
  init(st.reused, static_cast<double>(requests[0].n_reused));
  auto add = [](FieldStats& f, double v) {
    f.min = std::min(f.min, v);
    f.max = std::max(f.max, v);
    f.mean += v;
  };
  for (const Request& r : requests) {
    add(st.input, static_cast<double>(r.total_len()));
    add(st.output, static_cast<double>(r.n_out));
    add(st.reused, static_cast<double>(r.n_reused));
  }
  const auto n = static_cast<double>(requests.size());
  st.input.mean /= n;
  st.output.mean /= n;
  st.reused.mean /= n;
  return st;
}

Trace merge_traces(const Trace& a, const Trace& b) {
  Trace out;
  auto append = [&](const Trace& t, const std::string& prefix) {
    for (const Request& r : t.requests) {
      Request c = r;
      c.id = prefix + r.id;
      c.session_id = prefix + r.session_id;
      out.requests.push_back(std::move(c));
    }
  };
  append(a, "a.");
  append(b, "b.");
  std::stable_sort(out.requests.begin(), out.requests.end(),
                   [](const Request& x, const Request& y) { return x.arrival < y.arrival; });
  link_sessions(out, ReuseMode::AsGiven);
  return out;
}

}  // namespace muxsim
