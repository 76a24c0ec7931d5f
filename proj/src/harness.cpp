#include "muxsim/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include <json.hpp>

#include "muxsim/errors.hpp"

namespace muxsim {

using nlohmann::json;

std::string_view to_string(SchedulerKind kind) {
  switch (kind) {
    case SchedulerKind::Mux:
      return "mux";
    case SchedulerKind::Chunked:
      return "chunked";
    case SchedulerKind::StaticPd:
      return "static-pd";
    case SchedulerKind::Elastic:
      return "elastic";
  }
  return "mux";
}

SchedulerKind scheduler_from_string(std::string_view name) {
  if (name == "mux") return SchedulerKind::Mux;
  if (name == "chunked") return SchedulerKind::Chunked;
  if (name == "static-pd") return SchedulerKind::StaticPd;
  if (name == "elastic") return SchedulerKind::Elastic;
  throw ConfigError("unknown scheduler: " + std::string(name));
}

// ---------------------------------------------------------------------------
// Config

namespace {

constexpr int kConfigVersion = 1;

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      throw ConfigError("unknown key '" + k + "' in " + std::string(where));
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig parse_run_config(std::istream& in) {
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  try {
    check_keys(j, {"version", "gpu", "model", "slo", "truth", "guard", "calibration", "scheduler", "workload",
                   "drain_horizon_us"},
               "config");
    if (j.value("version", 0) != kConfigVersion) throw ConfigError("unsupported config version");

    if (j.contains("gpu")) {
      const auto& g = j["gpu"];
      check_keys(g, {"preset", "total_sms", "granularity", "min_side", "reconfig_cost_us", "device_count",
                     "kv_pool_tokens", "link_bandwidth_bytes_per_us"},
                 "gpu");
      const std::string preset = g.value("preset", std::string("a100"));
      if (preset == "a100") cfg.gpu = GpuSpec::a100();
      else if (preset == "h100") cfg.gpu = GpuSpec::h100();
      else throw ConfigError("unknown gpu preset: " + preset);
      read(g, "total_sms", cfg.gpu.total_sms);
      read(g, "granularity", cfg.gpu.granularity);
      read(g, "min_side", cfg.gpu.min_side);
      read(g, "reconfig_cost_us", cfg.gpu.reconfig_cost_us);
      read(g, "device_count", cfg.gpu.device_count);
      read(g, "kv_pool_tokens", cfg.gpu.kv_pool_tokens);
      read(g, "link_bandwidth_bytes_per_us", cfg.gpu.link_bandwidth_bytes_per_us);
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      check_keys(m, {"name", "n_layers", "hidden_dim", "kv_bytes_per_token"}, "model");
      read(m, "name", cfg.model.name);
      read(m, "n_layers", cfg.model.n_layers);
      read(m, "hidden_dim", cfg.model.hidden_dim);
      read(m, "kv_bytes_per_token", cfg.model.kv_bytes_per_token);
      if (cfg.model.n_layers < 1 || cfg.model.hidden_dim < 1) throw ConfigError("model sizes must be >= 1");
    }
    if (j.contains("slo")) {
      const auto& s = j["slo"];
      check_keys(s, {"tbt_slo_us", "ttft_slo_us", "percentile"}, "slo");
      read(s, "tbt_slo_us", cfg.slo.tbt_slo_us);
      read(s, "ttft_slo_us", cfg.slo.ttft_slo_us);
      read(s, "percentile", cfg.slo.percentile);
      if (cfg.slo.tbt_slo_us <= 0 || cfg.slo.ttft_slo_us <= 0) throw ConfigError("SLOs must be positive");
    }
    if (j.contains("truth")) {
      const auto& t = j["truth"];
      check_keys(t, {"prefill_full", "decode_full", "prefill_sm_exp", "decode_sm_exp", "prefill_device_exp",
                     "decode_device_exp", "contention_max", "contention_seed", "prefill_slowdown_max"},
                 "truth");
      read(t, "prefill_full", cfg.truth.prefill_full.t);
      read(t, "decode_full", cfg.truth.decode_full.t);
      read(t, "prefill_sm_exp", cfg.truth.prefill_sm_exp);
      read(t, "decode_sm_exp", cfg.truth.decode_sm_exp);
      read(t, "prefill_device_exp", cfg.truth.prefill_device_exp);
      read(t, "decode_device_exp", cfg.truth.decode_device_exp);
      read(t, "contention_max", cfg.truth.contention_max);
      read(t, "contention_seed", cfg.truth.contention_seed);
      read(t, "prefill_slowdown_max", cfg.truth.prefill_slowdown_max);
    }
    if (j.contains("guard")) {
      const auto& g = j["guard"];
      check_keys(g, {"cap", "cap_override", "decode_key"}, "guard");
      read(g, "cap", cfg.guard.cap);
      read(g, "cap_override", cfg.guard.cap_override);
      const std::string key = g.value("decode_key", std::string("max_reused"));
      if (key == "max_reused") cfg.guard.key = DecodeKey::MaxReused;
      else if (key == "total_reused") cfg.guard.key = DecodeKey::TotalReused;
      else throw ConfigError("unknown guard decode_key: " + key);
    }
    if (j.contains("calibration")) cfg.calibration_path = j["calibration"].get<std::string>();
    if (j.contains("scheduler")) {
      const auto& s = j["scheduler"];
      check_keys(s, {"name", "mux", "chunked", "static_pd", "elastic"}, "scheduler");
      if (s.contains("name")) cfg.scheduler.kind = scheduler_from_string(s["name"].get<std::string>());
      if (s.contains("mux")) {
        const auto& m = s["mux"];
        check_keys(m, {"layerwise", "preemption", "poll_interval_us", "decode_launch_us", "group_launch_base_us",
                       "group_launch_per_layer_us", "full_launch_us", "max_prefill_tokens",
                       "max_outstanding_groups", "idle_group_target_us"},
                   "scheduler.mux");
        auto& p = cfg.scheduler.mux;
        read(m, "layerwise", p.layerwise);
        read(m, "preemption", p.preemption);
        read(m, "poll_interval_us", p.poll_interval_us);
        read(m, "decode_launch_us", p.decode_launch_us);
        read(m, "group_launch_base_us", p.group_launch_base_us);
        read(m, "group_launch_per_layer_us", p.group_launch_per_layer_us);
        read(m, "full_launch_us", p.full_launch_us);
        read(m, "max_prefill_tokens", p.max_prefill_tokens);
        read(m, "max_outstanding_groups", p.max_outstanding_groups);
        read(m, "idle_group_target_us", p.idle_group_target_us);
        if (p.max_outstanding_groups < 1) throw ConfigError("max_outstanding_groups must be >= 1");
      }
      if (s.contains("chunked")) {
        const auto& c = s["chunked"];
        check_keys(c, {"token_budget", "model", "anchor_base_us", "anchor_per_token_us", "decode_launch_us"},
                   "scheduler.chunked");
        auto& p = cfg.scheduler.chunked;
        read(c, "token_budget", p.token_budget);
        const std::string model = c.value("model", std::string("compositional"));
        if (model == "compositional") p.model = FusedModel::Compositional;
        else if (model == "anchor") p.model = FusedModel::Anchor;
        else throw ConfigError("unknown chunked model: " + model);
        read(c, "anchor_base_us", p.anchor.base_us);
        read(c, "anchor_per_token_us", p.anchor.per_token_us);
        read(c, "decode_launch_us", p.decode_launch_us);
      }
      if (s.contains("static_pd")) {
        const auto& c = s["static_pd"];
        check_keys(c, {"prefill_devices", "prefill_launch_us", "decode_launch_us", "max_prefill_tokens"},
                   "scheduler.static_pd");
        auto& p = cfg.scheduler.disagg;
        read(c, "prefill_devices", p.prefill_devices);
        read(c, "prefill_launch_us", p.prefill_launch_us);
        read(c, "decode_launch_us", p.decode_launch_us);
        read(c, "max_prefill_tokens", p.max_prefill_tokens);
      }
      if (s.contains("elastic")) {
        const auto& c = s["elastic"];
        check_keys(c, {"decode_devices", "tokens_per_device", "prefill_launch_us", "decode_launch_us"},
                   "scheduler.elastic");
        auto& p = cfg.scheduler.elastic;
        read(c, "decode_devices", p.decode_devices);
        read(c, "tokens_per_device", p.tokens_per_device);
        read(c, "prefill_launch_us", p.prefill_launch_us);
        read(c, "decode_launch_us", p.decode_launch_us);
      }
    }
    if (j.contains("workload")) {
      const auto& w = j["workload"];
      check_keys(w, {"task", "rate_per_s", "duration_us", "seed", "ttft_slo_per_token_us", "trace"}, "workload");
      read(w, "task", cfg.workload.task);
      read(w, "rate_per_s", cfg.workload.rate_per_s);
      read(w, "duration_us", cfg.workload.duration_us);
      read(w, "seed", cfg.workload.seed);
      read(w, "ttft_slo_per_token_us", cfg.workload.ttft_slo_per_token_us);
      if (w.contains("trace")) cfg.workload.trace_path = w["trace"].get<std::string>();
    }
    read(j, "drain_horizon_us", cfg.drain_horizon_us);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  return parse_run_config(in);
}

void write_run_config(std::ostream& out, const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["version"] = kConfigVersion;
  j["gpu"] = {{"preset", cfg.gpu.name},
              {"total_sms", cfg.gpu.total_sms},
              {"granularity", cfg.gpu.granularity},
              {"min_side", cfg.gpu.min_side},
              {"reconfig_cost_us", cfg.gpu.reconfig_cost_us},
              {"device_count", cfg.gpu.device_count},
              {"kv_pool_tokens", cfg.gpu.kv_pool_tokens},
              {"link_bandwidth_bytes_per_us", cfg.gpu.link_bandwidth_bytes_per_us}};
  j["model"] = {{"name", cfg.model.name},
                {"n_layers", cfg.model.n_layers},
                {"hidden_dim", cfg.model.hidden_dim},
                {"kv_bytes_per_token", cfg.model.kv_bytes_per_token}};
  j["slo"] = {{"tbt_slo_us", cfg.slo.tbt_slo_us},
              {"ttft_slo_us", cfg.slo.ttft_slo_us},
              {"percentile", cfg.slo.percentile}};
  j["truth"] = {{"prefill_full", cfg.truth.prefill_full.t},
                {"decode_full", cfg.truth.decode_full.t},
                {"prefill_sm_exp", cfg.truth.prefill_sm_exp},
                {"decode_sm_exp", cfg.truth.decode_sm_exp},
                {"prefill_device_exp", cfg.truth.prefill_device_exp},
                {"decode_device_exp", cfg.truth.decode_device_exp},
                {"contention_max", cfg.truth.contention_max},
                {"contention_seed", cfg.truth.contention_seed},
                {"prefill_slowdown_max", cfg.truth.prefill_slowdown_max}};
  j["guard"] = {{"cap", cfg.guard.cap},
                {"cap_override", cfg.guard.cap_override},
                {"decode_key", cfg.guard.key == DecodeKey::MaxReused ? "max_reused" : "total_reused"}};
  if (cfg.calibration_path) j["calibration"] = *cfg.calibration_path;
  const auto& m = cfg.scheduler.mux;
  const auto& c = cfg.scheduler.chunked;
  const auto& d = cfg.scheduler.disagg;
  const auto& e = cfg.scheduler.elastic;
  j["scheduler"] = {
      {"name", to_string(cfg.scheduler.kind)},
      {"mux",
       {{"layerwise", m.layerwise},
        {"preemption", m.preemption},
        {"poll_interval_us", m.poll_interval_us},
        {"decode_launch_us", m.decode_launch_us},
        {"group_launch_base_us", m.group_launch_base_us},
        {"group_launch_per_layer_us", m.group_launch_per_layer_us},
        {"full_launch_us", m.full_launch_us},
        {"max_prefill_tokens", m.max_prefill_tokens},
        {"max_outstanding_groups", m.max_outstanding_groups},
        {"idle_group_target_us", m.idle_group_target_us}}},
      {"chunked",
       {{"token_budget", c.token_budget},
        {"model", c.model == FusedModel::Anchor ? "anchor" : "compositional"},
        {"anchor_base_us", c.anchor.base_us},
        {"anchor_per_token_us", c.anchor.per_token_us},
        {"decode_launch_us", c.decode_launch_us}}},
      {"static_pd",
       {{"prefill_devices", d.prefill_devices},
        {"prefill_launch_us", d.prefill_launch_us},
        {"decode_launch_us", d.decode_launch_us},
        {"max_prefill_tokens", d.max_prefill_tokens}}},
      {"elastic",
       {{"decode_devices", e.decode_devices},
        {"tokens_per_device", e.tokens_per_device},
        {"prefill_launch_us", e.prefill_launch_us},
        {"decode_launch_us", e.decode_launch_us}}}};
  nlohmann::ordered_json w = {{"task", cfg.workload.task},
                              {"rate_per_s", cfg.workload.rate_per_s},
                              {"duration_us", cfg.workload.duration_us},
                              {"seed", cfg.workload.seed},
                              {"ttft_slo_per_token_us", cfg.workload.ttft_slo_per_token_us}};
  if (cfg.workload.trace_path) w["trace"] = *cfg.workload.trace_path;
  j["workload"] = w;
  j["drain_horizon_us"] = cfg.drain_horizon_us;
  out << j.dump(2) << '\n';
}

ServingSetup make_setup(const RunConfig& cfg, std::uint64_t seed) {
  ServingSetup s;
  s.gpu = cfg.gpu;
  s.model = cfg.model;
  s.truth = cfg.truth;
  s.truth.total_sms = cfg.gpu.total_sms;
  s.truth.device_count = cfg.gpu.device_count;
  s.slo = cfg.slo;
  s.seed = seed;
  s.drain_horizon_us = cfg.drain_horizon_us;
  const auto parts = decode_partitions(cfg.gpu);
  if (cfg.calibration_path) {
    Calibration cal = load_calibration(*cfg.calibration_path);
    if (cal.guard.axes().partitions != parts) {
      throw ConfigError("calibration partitions do not match the GPU partition set");
    }
    s.coeffs = std::move(cal.coeffs);
    s.guard = std::move(cal.guard);
  } else {
    s.coeffs = s.truth.exact_coeffs(parts);
    ContentionGuard exact = s.truth.exact_guard(default_guard_axes(parts), cfg.guard.cap);
    ContentionGuard g(exact.axes(), cfg.guard.cap, cfg.guard.cap_override, cfg.guard.key);
    for (std::size_t i = 0; i < exact.raw().size(); ++i) g.set(g.unflat(i), exact.raw()[i]);
    s.guard = std::move(g);
  }
  for (int sms : profiled_sms(parts, cfg.gpu.total_sms)) {
    if (!s.coeffs.prefill.count(sms) || !s.coeffs.decode.count(sms)) {
      throw ConfigError("calibration lacks coefficients for " + std::to_string(sms) + " SMs");
    }
  }
  return s;
}

namespace {

Trace task_trace(std::string_view task, const WorkloadConfig& w, const SloTargets& slo, double rate,
                 std::uint64_t seed) {
  TraceSpec spec;
  spec.arrivals = PoissonArrivals{rate, seed, w.duration_us};
  spec.lengths = task_dist(task);
  spec.multi_turn = task_multi_turn(task);
  spec.ttft_slo = slo.ttft_slo_us;
  spec.ttft_slo_per_token_us = w.ttft_slo_per_token_us;
  spec.tbt_slo = slo.tbt_slo_us;
  return gen_poisson(spec);
}

}  // namespace

Trace make_trace(const WorkloadConfig& w, const SloTargets& slo, double rate, std::uint64_t seed) {
  if (w.trace_path) return load_trace(*w.trace_path, ReuseMode::Reconstruct, slo.ttft_slo_us, slo.tbt_slo_us);
  const auto plus = w.task.find('+');
  if (plus == std::string::npos) return task_trace(w.task, w, slo, rate, seed);
  const Trace a = task_trace(w.task.substr(0, plus), w, slo, rate / 2, seed);
  const Trace b = task_trace(w.task.substr(plus + 1), w, slo, rate / 2, seed ^ 0xA5A5A5A5ULL);
  return merge_traces(a, b);
}

Trace make_trace(const WorkloadConfig& w, const SloTargets& slo) {
  return make_trace(w, slo, w.rate_per_s, w.seed);
}

RunResult run_simulation(const Trace& trace, const ServingSetup& setup, const SchedulerParams& params) {
  switch (params.kind) {
    case SchedulerKind::Mux:
      return run_mux(trace, setup, params.mux);
    case SchedulerKind::Chunked:
      return run_chunked(trace, setup, params.chunked);
    case SchedulerKind::StaticPd:
      return run_static_pd(trace, setup, params.disagg);
    case SchedulerKind::Elastic:
      return run_elastic(trace, setup, params.elastic);
  }
  throw ConfigError("unknown scheduler kind");
}

// ---------------------------------------------------------------------------
// Metrics

LatencySummary summarize(const std::vector<double>& samples, double tail) {
  LatencySummary s;
  s.count = samples.size();
  if (samples.empty()) return s;
  s.p50 = percentile(samples, 50);
  s.p99 = percentile(samples, tail);
  double sum = 0;
  for (double v : samples) sum += v;
  s.avg = sum / static_cast<double>(samples.size());
  return s;
}

double bubble_ratio(std::vector<std::pair<SimTime, SimTime>> intervals) {
  intervals.erase(std::remove_if(intervals.begin(), intervals.end(), [](const auto& iv) { return iv.second <= iv.first; }),
                  intervals.end());
  if (intervals.empty()) return 0.0;
  std::sort(intervals.begin(), intervals.end());
  const SimTime first = intervals.front().first;
  SimTime last = first;
  SimTime busy = 0;
  SimTime cur_start = intervals.front().first;
  SimTime cur_end = intervals.front().second;
  for (const auto& [s, e] : intervals) {
    if (s > cur_end) {
      busy += cur_end - cur_start;
      cur_start = s;
      cur_end = e;
    } else {
      cur_end = std::max(cur_end, e);
    }
  }
  busy += cur_end - cur_start;
  last = cur_end;
  const SimTime window = last - first;
  return window > 0 ? static_cast<double>(window - busy) / static_cast<double>(window) : 0.0;
}

double bubble_ratio(std::span<const BusyInterval> busy, Side side) {
  std::vector<std::pair<SimTime, SimTime>> iv;
  for (const auto& b : busy) {
    if (b.side == side) iv.emplace_back(b.start, b.end);
  }
  return bubble_ratio(std::move(iv));
}

double utilization(std::span<const BusyInterval> busy) {
  if (busy.empty()) return 0.0;
  SimTime first = busy.front().start;
  SimTime last = busy.front().end;
  double weighted = 0;
  for (const auto& b : busy) {
    first = std::min(first, b.start);
    last = std::max(last, b.end);
    weighted += static_cast<double>(b.end - b.start) * b.share;
  }
  return last > first ? weighted / static_cast<double>(last - first) : 0.0;
}

bool is_unstable(const RunResult& r) { return r.pending_at_last_arrival > 2 * r.arrivals_final_window; }

MetricsReport compute_metrics(std::span<const std::pair<const RunResult*, const Trace*>> runs,
                              const SloTargets& slo) {
  MetricsReport m;
  std::vector<double> ttft, tbt, tpot, e2e, ttft_tok, gaps;
  std::size_t ttft_ok = 0;
  std::size_t tbt_ok = 0;
  std::size_t both_ok = 0;
  double bubble_d = 0, bubble_p = 0, util = 0;
  for (const auto& [res, trace] : runs) {
    m.scheduler = res->scheduler;
    m.requests += res->requests.size();
    m.cache += res->cache;
    m.infeasible_iterations += res->infeasible_iterations;
    m.unstable = m.unstable || is_unstable(*res);
    m.preemptions += res->preemptions;
    for (std::size_t i = 0; i < res->requests.size(); ++i) {
      const auto& o = res->requests[i];
      const Request& rq = trace->requests[i];
      m.tokens_emitted += o.token_times.size();
      m.prefill_tokens += o.prefill_tokens;
      const SimTime ttft_slo = rq.ttft_slo > 0 ? rq.ttft_slo : slo.ttft_slo_us;
      bool req_tbt_ok = true;
      for (std::size_t k = 1; k < o.token_times.size(); ++k) {
        const double g = static_cast<double>(o.token_times[k] - o.token_times[k - 1]);
        tbt.push_back(g);
        if (g <= static_cast<double>(slo.tbt_slo_us)) ++tbt_ok;
        else req_tbt_ok = false;
      }
      if (o.first_token >= 0) {
        const double t = static_cast<double>(o.first_token - o.release);
        ttft.push_back(t);
        ttft_tok.push_back(t / static_cast<double>(rq.total_len()));
        const bool ok = o.first_token - o.release <= ttft_slo;
        if (ok) ++ttft_ok;
        if (ok && req_tbt_ok && o.finish >= 0) ++both_ok;
      }
      if (o.finish >= 0) {
        ++m.completed;
        const double e = static_cast<double>(o.finish - o.release);
        e2e.push_back(e);
        if (rq.n_out > 1 && o.first_token >= 0) {
          tpot.push_back((e - static_cast<double>(o.first_token - o.release)) / static_cast<double>(rq.n_out - 1));
        }
      }
    }
    for (std::size_t k = 1; k < res->iterations.size(); ++k) {
      const auto& prev = res->iterations[k - 1];
      const auto& cur = res->iterations[k];
      // Consecutive iterations only: a gap across an idle decode side is not a
      // decode gap.
      if (cur.start - prev.end <= slo.tbt_slo_us) gaps.push_back(static_cast<double>(cur.end - prev.end));
    }
    bubble_d += bubble_ratio(res->busy, Side::Decode);
    bubble_p += bubble_ratio(res->busy, Side::Prefill);
    util += utilization(res->busy);
  }
  const double p = slo.percentile;
  m.ttft = summarize(ttft, p);
  m.tbt = summarize(tbt, p);
  m.tpot = summarize(tpot, p);
  m.e2e = summarize(e2e, p);
  m.ttft_per_token = summarize(ttft_tok, p);
  m.decode_gap = summarize(gaps, p);
  m.ttft_attainment = m.requests ? static_cast<double>(ttft_ok) / static_cast<double>(m.requests) : 0.0;
  m.tbt_attainment = tbt.empty() ? 1.0 : static_cast<double>(tbt_ok) / static_cast<double>(tbt.size());
  m.slo_attainment = m.requests ? static_cast<double>(both_ok) / static_cast<double>(m.requests) : 0.0;
  m.saturated = m.infeasible_iterations > 0;
  const double n = runs.empty() ? 1.0 : static_cast<double>(runs.size());
  m.bubble_decode = bubble_d / n;
  m.bubble_prefill = bubble_p / n;
  m.bubble_mean = (m.bubble_decode + m.bubble_prefill) / 2.0;
  m.utilization = util / n;
  return m;
}

MetricsReport compute_metrics(const RunResult& result, const Trace& trace, const SloTargets& slo) {
  const std::pair<const RunResult*, const Trace*> one{&result, &trace};
  return compute_metrics(std::span(&one, 1), slo);
}

double goodput(const SloAttainmentCurve& curve, const SloTargets& slo) {
  double best = 0;
  for (const auto& p : curve) {
    if (!p.unstable && p.p99_tbt <= static_cast<double>(slo.tbt_slo_us)) best = std::max(best, p.rate);
  }
  return best;
}

SloAttainmentCurve sweep(const TraceFactory& traces, const SetupFactory& setups, const SchedulerParams& params,
                         std::span<const double> rates, std::span<const std::uint64_t> seeds) {
  for (std::size_t i = 1; i < rates.size(); ++i) {
    if (!(rates[i] > rates[i - 1])) throw ConfigError("sweep rates must be strictly increasing");
  }
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  SloAttainmentCurve curve;
  for (double rate : rates) {
    std::vector<Trace> ts;
    std::vector<RunResult> rs;
    ts.reserve(seeds.size());
    rs.reserve(seeds.size());
    for (std::uint64_t seed : seeds) {
      ts.push_back(traces(rate, seed));
      ServingSetup setup = setups(seed);
      rs.push_back(run_simulation(ts.back(), setup, params));
    }
    std::vector<std::pair<const RunResult*, const Trace*>> runs;
    for (std::size_t k = 0; k < rs.size(); ++k) runs.emplace_back(&rs[k], &ts[k]);
    const ServingSetup probe = setups(seeds.front());
    CurvePoint pt;
    pt.rate = rate;
    pt.report = compute_metrics(runs, probe.slo);
    pt.p99_ttft = pt.report.ttft.p99;
    pt.p99_tbt = pt.report.tbt.p99;
    pt.attainment = pt.report.slo_attainment;
    pt.unstable = pt.report.unstable;
    curve.push_back(pt);
    if (pt.unstable) break;
  }
  return curve;
}

SloAttainmentCurve sweep(const RunConfig& cfg, std::span<const double> rates, std::span<const std::uint64_t> seeds) {
  const TraceFactory traces = [&cfg](double rate, std::uint64_t seed) {
    return make_trace(cfg.workload, cfg.slo, rate, seed);
  };
  const SetupFactory setups = [&cfg](std::uint64_t seed) {
    ServingSetup s = make_setup(cfg, seed);
    s.record_events = false;
    return s;
  };
  return sweep(traces, setups, cfg.scheduler, rates, seeds);
}

// ---------------------------------------------------------------------------
// Output files

void write_request_metrics(std::ostream& out, const RunResult& result, const Trace& trace) {
  for (std::size_t i = 0; i < result.requests.size(); ++i) {
    const auto& o = result.requests[i];
    const auto& r = trace.requests[i];
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["session"] = r.session_id;
    j["arrival_us"] = r.arrival;
    j["release_us"] = o.release;
    j["n_new"] = r.n_new;
    j["n_reused"] = r.n_reused;
    j["n_out"] = r.n_out;
    j["hit_tokens"] = o.hit_tokens;
    j["prefill_tokens"] = o.prefill_tokens;
    j["ttft_us"] = o.first_token >= 0 ? o.first_token - o.release : -1;
    j["e2e_us"] = o.finish >= 0 ? o.finish - o.release : -1;
    SimTime max_tbt = 0;
    for (std::size_t k = 1; k < o.token_times.size(); ++k) {
      max_tbt = std::max(max_tbt, o.token_times[k] - o.token_times[k - 1]);
    }
    j["max_tbt_us"] = max_tbt;
    j["tokens"] = o.token_times.size();
    j["preempted"] = o.preempted;
    out << j.dump() << '\n';
  }
}

void write_summary_header(std::ostream& out) {
  out << "scheduler,rate,seed,requests,completed,p50_ttft_us,p99_ttft_us,avg_ttft_us,p50_tbt_us,p99_tbt_us,"
         "avg_tbt_us,avg_tpot_us,p99_tpot_us,p99_e2e_us,p99_ttft_per_token_us,p99_decode_gap_us,"
         "ttft_attainment,tbt_attainment,slo_attainment,cache_hit_rate,bubble_decode,bubble_prefill,"
         "bubble_mean,utilization,prefill_tokens,preemptions,saturated,unstable\n";
}

void write_summary_row(std::ostream& out, const MetricsReport& m, double rate, std::uint64_t seed) {
  out << m.scheduler << ',' << rate << ',' << seed << ',' << m.requests << ',' << m.completed << ','
      << m.ttft.p50 << ',' << m.ttft.p99 << ',' << m.ttft.avg << ',' << m.tbt.p50 << ',' << m.tbt.p99 << ','
      << m.tbt.avg << ',' << m.tpot.avg << ',' << m.tpot.p99 << ',' << m.e2e.p99 << ',' << m.ttft_per_token.p99
      << ',' << m.decode_gap.p99 << ',' << m.ttft_attainment << ',' << m.tbt_attainment << ','
      << m.slo_attainment << ',' << m.cache.hit_rate() << ',' << m.bubble_decode << ',' << m.bubble_prefill
      << ',' << m.bubble_mean << ',' << m.utilization << ',' << m.prefill_tokens << ',' << m.preemptions << ','
      << (m.saturated ? 1 : 0) << ',' << (m.unstable ? 1 : 0) << '\n';
}

void write_curve_csv(std::ostream& out, const SloAttainmentCurve& curve) {
  out << "rate,p99_ttft_us,p99_tbt_us,attainment,unstable\n";
  for (const auto& p : curve) {
    out << p.rate << ',' << p.p99_ttft << ',' << p.p99_tbt << ',' << p.attainment << ',' << (p.unstable ? 1 : 0)
        << '\n';
  }
}

LogAnalysis analyze_log(std::istream& in, std::ostream* timeline_csv) {
  LogAnalysis a;
  std::vector<BusyInterval> busy;
  std::set<std::string> field_names;
  std::vector<json> decisions;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError("log line " + std::to_string(line_no) + ": " + e.what());
    }
    const std::string type = j.value("type", std::string("event"));
    if (type == "event") {
      ++a.events;
    } else if (type == "busy") {
      BusyInterval b;
      b.side = j.at("side").get<std::string>() == "prefill" ? Side::Prefill : Side::Decode;
      b.start = j.at("start_us").get<SimTime>();
      b.end = j.at("end_us").get<SimTime>();
      b.share = j.value("share", 0.0);
      busy.push_back(b);
    } else if (type == "decision") {
      ++a.decisions;
      for (const auto& [k, v] : j.items()) {
        if (k != "type" && k != "time_us" && k != "kind") field_names.insert(k);
      }
      if (timeline_csv) decisions.push_back(std::move(j));
    } else {
      throw SchemaError("log line " + std::to_string(line_no) + ": unknown record type " + type);
    }
  }
  a.bubble_decode = bubble_ratio(busy, Side::Decode);
  a.bubble_prefill = bubble_ratio(busy, Side::Prefill);
  a.bubble_mean = (a.bubble_decode + a.bubble_prefill) / 2.0;
  if (timeline_csv) {
    *timeline_csv << "time_us,kind";
    for (const auto& f : field_names) *timeline_csv << ',' << f;
    *timeline_csv << '\n';
    for (const auto& d : decisions) {
      *timeline_csv << d.at("time_us").get<SimTime>() << ',' << d.at("kind").get<std::string>();
      for (const auto& f : field_names) {
        *timeline_csv << ',';
        if (d.contains(f)) *timeline_csv << d[f].dump();
      }
      *timeline_csv << '\n';
    }
  }
  return a;
}

}  // namespace muxsim
