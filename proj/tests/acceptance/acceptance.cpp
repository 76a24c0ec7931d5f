// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../common/invariants.hpp"
#include "muxsim/baselines.hpp"
#include "muxsim/cost_model.hpp"
#include "muxsim/gpu_model.hpp"
#include "muxsim/harness.hpp"
#include "muxsim/mux_scheduler.hpp"
#include "muxsim/truth.hpp"

using namespace muxsim;

namespace {

// Tolerances and budgets.
constexpr double kPrefillDeviationMax = 0.0816;
constexpr double kDecodeDeviationMax = 0.0884;
constexpr double kProfileNoise = 0.01;
constexpr SimTime kAnchorTolUs = 1000;
constexpr double kFullLaunchDeltaTol = 0.20;
constexpr double kPreemptionGainMin = 1.2;

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, double budget_s, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < budget_s;
  const bool pass = v.pass && in_time;
  if (!pass) ++failures;
  std::printf("%s %2d %s: %s [%.2fs / %.0fs%s]\n", pass ? "PASS" : "FAIL", id, name, v.detail.c_str(), secs,
              budget_s, in_time ? "" : " over budget");
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Calibration profiled_calibration(const GpuSpec& gpu, const TruthModel& truth, double noise, std::uint64_t seed) {
  const auto parts = decode_partitions(gpu);
  const auto sms = profiled_sms(parts, gpu.total_sms);
  auto samples = synth_solo_profiles(truth, Phase::Prefill, sms, 200, noise, seed);
  auto decode = synth_solo_profiles(truth, Phase::Decode, sms, 200, noise, seed + 1);
  samples.insert(samples.end(), decode.begin(), decode.end());
  const GuardAxes axes = default_guard_axes(parts);
  auto corun = synth_corun_profiles(truth, axes, gen_profile_plan(axes), 1, seed + 2);
  samples.insert(samples.end(), corun.begin(), corun.end());
  return calibrate(samples, axes);
}

ServingSetup calibrated_setup(const Calibration& cal) {
  ServingSetup s = exact_setup(GpuSpec::a100(), TruthModel{});
  s.coeffs = cal.coeffs;
  s.guard = cal.guard;
  return s;
}

Trace first_n(Trace t, std::size_t n) {
  t.requests.resize(std::min(n, t.requests.size()));
  for (auto& s : t.sessions) {
    s.turns.erase(std::remove_if(s.turns.begin(), s.turns.end(), [n](std::size_t i) { return i >= n; }),
                  s.turns.end());
  }
  return t;
}

WorkloadConfig workload(const std::string& task, SimTime duration, double per_token = 0.0) {
  WorkloadConfig w;
  w.task = task;
  w.duration_us = duration;
  w.ttft_slo_per_token_us = per_token;
  return w;
}

double sweep_goodput(const WorkloadConfig& w, const ServingSetup& base, const SchedulerParams& params,
                     const std::vector<double>& rates, const std::vector<std::uint64_t>& seeds) {
  const TraceFactory traces = [&](double rate, std::uint64_t seed) { return make_trace(w, base.slo, rate, seed); };
  const SetupFactory setups = [&](std::uint64_t seed) {
    ServingSetup s = base;
    s.seed = seed;
    s.record_events = false;
    return s;
  };
  return goodput(sweep(traces, setups, params, rates, seeds), base.slo);
}

// ---------------------------------------------------------------------------

Verdict c1_layers_formula() {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const SimTime t_d = static_cast<SimTime>(rng() % 300000) + 1;
    const SimTime t_p = static_cast<SimTime>(rng() % 3000000) + 1;
    const int n_t = static_cast<int>(rng() % 160) + 1;
    const int rem = static_cast<int>(rng() % n_t) + 1;
    const long double exact = std::ceil(static_cast<long double>(t_d) * n_t / static_cast<long double>(t_p));
    const int expect = static_cast<int>(std::clamp<long double>(exact, 1, rem));
    if (layers_to_launch(t_d, t_p, n_t, rem) != expect) {
      return {false, "mismatch at (" + std::to_string(t_d) + ", " + std::to_string(t_p) + ", " +
                         std::to_string(n_t) + ")"};
    }
  }
  return {true, "1000/1000 triples match"};
}

Verdict c2_config_counts() {
  const auto a = partition_configs(GpuSpec::a100()).size();
  const auto h = partition_configs(GpuSpec::h100()).size();
  return {a == 6 && h == 7, "108 SMs -> " + std::to_string(a) + ", 132 SMs -> " + std::to_string(h)};
}

Verdict c3_plan_count() {
  const auto n = gen_profile_plan(default_guard_axes(decode_partitions(GpuSpec::a100()))).size();
  return {n == 7200, std::to_string(n) + " profile points"};
}

Verdict c4_predictor_accuracy() {
  const TruthModel truth;
  const auto sms = profiled_sms(decode_partitions(GpuSpec::a100()), 108);
  double worst_p = 0, worst_d = 0;
  for (auto [phase, worst] : {std::pair{Phase::Prefill, &worst_p}, std::pair{Phase::Decode, &worst_d}}) {
    const auto samples = synth_solo_profiles(truth, phase, sms, 200, kProfileNoise, 42);
    for (int s : sms) *worst = std::max(*worst, fit(samples, phase, s).max_holdout_deviation);
  }
  return {worst_p <= kPrefillDeviationMax && worst_d <= kDecodeDeviationMax,
          fmt("prefill max holdout deviation %.4f", worst_p) + fmt(", decode %.4f", worst_d)};
}

Verdict c5_chunked_dilemma() {
  ChunkedConfig cfg;
  cfg.model = FusedModel::Anchor;
  cfg.anchor = AnchorModel::from_points(256, 100 * kMsUs, 4096, 505 * kMsUs);
  const TruthModel truth;
  // Full-budget steps: a chunk of B - bs tokens fused with bs decoders.
  auto full_step = [&](Tokens b) {
    const std::vector<Tokens> decode(16, 4000);
    const std::vector<PrefillItem> chunk{{b - 16, 1000}};
    return fused_step_us(cfg, chunk, decode, truth.prefill_at(108), truth.decode_at(108));
  };
  const SimTime t4096 = full_step(4096);
  const SimTime t256 = full_step(256);
  ServingSetup setup = exact_setup(GpuSpec::a100(), truth);
  setup.record_events = false;
  const Trace trace = make_trace(workload("loogle", 120 * kSecUs), setup.slo, 2.0, 3);
  const std::vector<Tokens> candidates{64, 128, 256, 512, 1024, 2048, 4096};
  const Tokens tuned = tune_token_budget(trace, setup, cfg, candidates);
  const bool ok = std::abs(t4096 - 505 * kMsUs) <= kAnchorTolUs && std::abs(t256 - 100 * kMsUs) <= kAnchorTolUs &&
                  tuned > 0 && tuned <= 256;
  return {ok, "T(4096)=" + std::to_string(t4096) + "us T(256)=" + std::to_string(t256) +
                  "us tuned budget=" + std::to_string(tuned)};
}

Verdict c6_slo_soundness() {
  const ServingSetup setup = exact_setup(GpuSpec::a100(), TruthModel{});
  const Trace trace = first_n(make_trace(workload("conversation", 8000 * kSecUs), setup.slo, 1.5, 6), 10000);
  if (trace.requests.size() != 10000) return {false, "trace has only " + std::to_string(trace.requests.size())};
  ServingSetup s = setup;
  s.record_events = false;
  const RunResult r = run_mux(trace, s);
  std::size_t feasible = 0, over = 0, draw_over = 0;
  for (const auto& it : r.iterations) {
    if (it.true_factor > it.guard_factor) ++draw_over;
    if (!it.feasible) continue;
    ++feasible;
    if (it.end - it.start > setup.slo.tbt_slo_us) ++over;
  }
  return {over == 0 && draw_over == 0 && feasible > 0,
          std::to_string(over) + " of " + std::to_string(feasible) + " feasible iterations over the SLO (" +
              std::to_string(r.iterations.size() - feasible) + " saturated)"};
}

Verdict c7_goodput_ordering() {
  const ServingSetup base = calibrated_setup(profiled_calibration(GpuSpec::a100(), TruthModel{}, kProfileNoise, 7));
  const WorkloadConfig w = workload("tool_agent", 300 * kSecUs);
  std::vector<double> rates;
  for (double r = 0.25; r <= 4.0 + 1e-9; r += 0.25) rates.push_back(r);
  const std::vector<std::uint64_t> seeds{1, 2};

  SchedulerParams mux;
  const double g_mux = sweep_goodput(w, base, mux, rates, seeds);
  // Each baseline gets its best setting.
  double g_chunked = 0;
  Tokens best_budget = 0;
  for (Tokens b : {32, 64, 128, 256, 512, 1024}) {
    SchedulerParams p;
    p.kind = SchedulerKind::Chunked;
    p.chunked.token_budget = b;
    const double g = sweep_goodput(w, base, p, rates, seeds);
    if (g > g_chunked) {
      g_chunked = g;
      best_budget = b;
    }
  }
  double g_static = 0, g_elastic = 0;
  for (int d : {2, 4, 6}) {
    SchedulerParams p;
    p.kind = SchedulerKind::StaticPd;
    p.disagg.prefill_devices = d;
    g_static = std::max(g_static, sweep_goodput(w, base, p, rates, seeds));
    p.kind = SchedulerKind::Elastic;
    p.elastic.decode_devices = d;
    g_elastic = std::max(g_elastic, sweep_goodput(w, base, p, rates, seeds));
  }
  const bool ok = g_mux > g_chunked && g_mux > g_static && g_mux > g_elastic;
  return {ok, fmt("goodput mux=%.2f", g_mux) + fmt(" chunked=%.2f", g_chunked) + " (B=" +
                  std::to_string(best_budget) + ")" + fmt(" static-pd=%.2f", g_static) +
                  fmt(" elastic=%.2f req/s", g_elastic)};
}

// Replays the trace's reuse pattern through LRU pools. Each request goes to a
// pool drawn at random, so later turns of a session may land elsewhere.
CacheStats replay_pools(const Trace& trace, Tokens total_capacity, int pools, std::uint64_t seed) {
  std::vector<KvCachePool> p;
  for (int i = 0; i < pools; ++i) p.emplace_back(total_capacity / pools);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, pools - 1);
  CacheStats st;
  for (const auto& r : trace.requests) {
    KvCachePool& pool = p[static_cast<std::size_t>(pick(rng))];
    pool.cache_lookup(r.session, r.n_reused, r.arrival);
    const Tokens need = std::max<Tokens>(0, r.total_len() + r.n_out - pool.cache_peek(r.session));
    if (pool.can_insert(r.session, need)) pool.cache_insert(r.session, need, false, r.arrival);
  }
  for (const auto& pool : p) st += pool.stats();
  return st;
}

Verdict c8_cache_trends() {
  ServingSetup setup = exact_setup(GpuSpec::a100(), TruthModel{});
  const Trace trace = make_trace(workload("tool_agent", 600 * kSecUs), setup.slo, 1.5, 1);
  std::vector<double> hits;
  bool monotone = true;
  bool split_ok = true;
  std::string detail = "hit rate by capacity:";
  for (Tokens cap : {125000, 250000, 500000, 1000000, 2000000, 4000000}) {
    const double h = replay_pools(trace, cap, 1, 8).hit_rate();
    const double h2 = replay_pools(trace, cap, 2, 8).hit_rate();
    if (!hits.empty() && h < hits.back()) monotone = false;
    if (h < h2) split_ok = false;
    hits.push_back(h);
    detail += fmt(" %.3f", h) + fmt("/%.3f", h2);
  }
  // The same comparison through the schedulers: static disaggregation splits
  // the pool between its instances.
  setup.gpu.kv_pool_tokens = 500000;
  setup.record_events = false;
  const double mux = run_mux(trace, setup).cache.hit_rate();
  const double pd = run_static_pd(trace, setup).cache.hit_rate();
  detail += fmt("; at 500K mux %.3f", mux) + fmt(" static-pd %.3f", pd);
  return {monotone && split_ok && mux >= pd, detail};
}

Verdict c9_ablations() {
  ServingSetup setup = exact_setup(GpuSpec::a100(), TruthModel{});
  setup.record_events = false;
  const SloTargets slo = setup.slo;

  const Trace t_launch = make_trace(workload("sharegpt", 300 * kSecUs), slo, 3.0, 11);
  MuxParams on;
  MuxParams off;
  off.layerwise = false;
  const double gap_on = compute_metrics(run_mux(t_launch, setup, on), t_launch, slo).decode_gap.p99;
  const double gap_off = compute_metrics(run_mux(t_launch, setup, off), t_launch, slo).decode_gap.p99;
  const double delta = gap_off - gap_on;
  const double charge = static_cast<double>(off.full_launch_us);
  const bool launch_ok = std::abs(delta - charge) <= kFullLaunchDeltaTol * charge;

  const Trace t_poll = make_trace(workload("tool_agent", 300 * kSecUs), slo, 1.0, 12);
  MuxParams slow;
  slow.poll_interval_us = 50 * kMsUs;
  const double tbt_sync = compute_metrics(run_mux(t_poll, setup, on), t_poll, slo).tbt.p99;
  const double tbt_slow = compute_metrics(run_mux(t_poll, setup, slow), t_poll, slo).tbt.p99;
  const bool poll_ok = tbt_slow > tbt_sync;

  // Half short, half long prompts at a load where long prefills keep the GPU
  // busy about a quarter of the time. The tail is heavy, so ten traces are
  // pooled before taking the percentile.
  MuxParams no_pre;
  no_pre.preemption = false;
  setup.slo.ttft_slo_us = 1 * kSecUs;
  std::vector<Trace> mixes;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    mixes.push_back(make_trace(workload("sharegpt+loogle", 3600 * kSecUs, 200.0), setup.slo, 0.1, seed));
  }
  std::vector<RunResult> with_pre, without_pre;
  for (const auto& t : mixes) {
    with_pre.push_back(run_mux(t, setup, on));
    without_pre.push_back(run_mux(t, setup, no_pre));
  }
  std::vector<std::pair<const RunResult*, const Trace*>> a, b;
  for (std::size_t i = 0; i < mixes.size(); ++i) {
    a.emplace_back(&with_pre[i], &mixes[i]);
    b.emplace_back(&without_pre[i], &mixes[i]);
  }
  const double tt_on = compute_metrics(a, setup.slo).ttft_per_token.p99;
  const double tt_off = compute_metrics(b, setup.slo).ttft_per_token.p99;
  const double gain = tt_on > 0 ? tt_off / tt_on : 0;
  const bool pre_ok = gain >= kPreemptionGainMin;

  return {launch_ok && poll_ok && pre_ok,
          fmt("decode-gap P99 +%.0fus without layer-wise launch", delta) + fmt(", P99 TBT %.0f", tbt_sync) +
              fmt(" -> %.0fus with 50ms polling", tbt_slow) + fmt(", preemption P99 TTFT/token gain %.2fx", gain)};
}

Verdict c10_invariants() {
  const ServingSetup setup = exact_setup(GpuSpec::a100(), TruthModel{});
  const char* tasks[] = {"tool_agent", "conversation", "sharegpt", "loogle", "openthoughts", "sharegpt+loogle"};
  const double rates[] = {1.5, 1.5, 4.0, 0.5, 0.5, 1.0};
  std::size_t violations = 0;
  std::string first;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const std::size_t k = seed % 6;
    const Trace trace = make_trace(workload(tasks[k], 60 * kSecUs, seed % 3 == 0 ? 150.0 : 0.0), setup.slo,
                                   rates[k], seed);
    MuxParams p;
    p.poll_interval_us = (seed % 4 == 1) ? 10 * kMsUs : 0;
    p.preemption = seed % 5 != 0;
    ServingSetup s = setup;
    s.seed = seed;
    const RunResult r = run_mux(trace, s, p);
    const auto v = testing::check_all(r, p, s.gpu.reconfig_cost_us);
    if (!v.empty() && first.empty()) first = std::string(tasks[k]) + " seed " + std::to_string(seed) + ": " + v.front();
    violations += v.size();
  }
  return {violations == 0, "100 runs, " + std::to_string(violations) + " violations" +
                               (first.empty() ? std::string() : " (" + first + ")")};
}

Verdict c11_determinism() {
  RunConfig cfg;
  cfg.workload = workload("tool_agent", 60 * kSecUs);
  auto dump = [&](SchedulerKind kind) {
    cfg.scheduler.kind = kind;
    const Trace trace = make_trace(cfg.workload, cfg.slo);
    const RunResult r = run_simulation(trace, make_setup(cfg, 5), cfg.scheduler);
    std::ostringstream out;
    write_run_log(out, r);
    return out.str();
  };
  std::size_t bytes = 0;
  for (auto kind : {SchedulerKind::Mux, SchedulerKind::Chunked, SchedulerKind::StaticPd, SchedulerKind::Elastic}) {
    const std::string a = dump(kind);
    const std::string b = dump(kind);
    if (a != b || a.empty()) return {false, std::string(to_string(kind)) + " logs differ"};
    bytes += a.size();
  }
  return {true, "4 schedulers, " + std::to_string(bytes) + " log bytes identical across repeats"};
}

}  // namespace

int main() {
  criterion(1, "layers-to-launch formula", 1, c1_layers_formula);
  criterion(2, "partition config counts", 1, c2_config_counts);
  criterion(3, "profile plan count", 1, c3_plan_count);
  criterion(4, "predictor holdout accuracy", 10, c4_predictor_accuracy);
  criterion(5, "chunked-prefill budget dilemma", 30, c5_chunked_dilemma);
  criterion(6, "SLO soundness with an exact guard", 120, c6_slo_soundness);
  criterion(7, "goodput ordering", 600, c7_goodput_ordering);
  criterion(8, "KV pool hit-rate trends", 120, c8_cache_trends);
  criterion(9, "ablation directions", 300, c9_ablations);
  criterion(10, "engine invariants", 300, c10_invariants);
  criterion(11, "deterministic logs", 10, c11_determinism);
  std::printf("%d of 11 criteria failed\n", failures);
  return failures;
}
