#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "muxsim/errors.hpp"
#include "muxsim/harness.hpp"
#include "muxsim/truth.hpp"

namespace fs = std::filesystem;
using namespace muxsim;

namespace {

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

GpuSpec gpu_preset(const std::string& name) {
  if (name == "a100") return GpuSpec::a100();
  if (name == "h100") return GpuSpec::h100();
  throw ConfigError("unknown gpu preset: " + name);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

void print_report(const MetricsReport& m) {
  std::printf("scheduler=%s requests=%zu completed=%zu\n", m.scheduler.c_str(), m.requests, m.completed);
  std::printf("ttft_us p50=%.0f p99=%.0f  tbt_us p50=%.0f p99=%.0f  tpot_us avg=%.0f\n", m.ttft.p50, m.ttft.p99,
              m.tbt.p50, m.tbt.p99, m.tpot.avg);
  std::printf("slo_attainment=%.4f cache_hit_rate=%.4f bubble=%.4f unstable=%d saturated=%d\n", m.slo_attainment,
              m.cache.hit_rate(), m.bubble_mean, m.unstable ? 1 : 0, m.saturated ? 1 : 0);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"muxsim: discrete-event simulator for intra-GPU prefill-decode multiplexing"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Simulate one workload with one scheduler");
  std::string run_config, run_trace, run_out = "run_out", run_scheduler;
  std::uint64_t run_seed = 0;
  run->add_option("-c,--config", run_config, "Run config JSON");
  run->add_option("-t,--trace", run_trace, "Trace JSONL (overrides the workload generator)");
  run->add_option("-s,--scheduler", run_scheduler, "mux | chunked | static-pd | elastic");
  run->add_option("--seed", run_seed, "Seed override");
  run->add_option("-o,--out,--out-dir", run_out, "Output directory");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Sweep arrival rates and report goodput");
  std::string sw_config, sw_out = "curve.csv", sw_scheduler;
  std::vector<double> sw_rates;
  std::vector<std::uint64_t> sw_seeds{1};
  sw->add_option("-c,--config", sw_config, "Run config JSON");
  sw->add_option("-r,--rates", sw_rates, "Arrival rates (req/s), increasing")->required()->delimiter(',');
  sw->add_option("--seeds", sw_seeds, "Seeds pooled per rate")->delimiter(',');
  sw->add_option("-s,--scheduler", sw_scheduler, "Scheduler override");
  sw->add_option("-o,--out", sw_out, "Curve CSV");

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Fit coefficients and the contention guard from profiles");
  std::string cal_in, cal_out = "calibration.jsonl", cal_gpu = "a100";
  double cal_cap = 1.3;
  bool cal_no_override = false;
  cal->add_option("-p,--profiles", cal_in, "Profile samples JSONL")->required();
  cal->add_option("-g,--gpu", cal_gpu, "a100 | h100");
  cal->add_option("--cap", cal_cap, "Guard cap for observed slowdowns");
  cal->add_flag("--no-cap-override", cal_no_override, "Never let observations exceed the cap");
  cal->add_option("-o,--out", cal_out, "Calibration JSONL");

  // synth-profile
  auto* sp = app.add_subcommand("synth-profile", "Profile the simulated hardware of a config");
  std::string sp_config, sp_out = "profiles.jsonl";
  std::size_t sp_per = 200;
  double sp_noise = 0.01;
  int sp_draws = 1;
  std::uint64_t sp_seed = 1;
  sp->add_option("-c,--config", sp_config, "Run config JSON (gpu and truth sections)");
  sp->add_option("--per-sms", sp_per, "Solo samples per phase and SM count");
  sp->add_option("--noise", sp_noise, "Multiplicative noise half-width");
  sp->add_option("--draws", sp_draws, "Slowdown draws per plan point");
  sp->add_option("--seed", sp_seed, "Seed");
  sp->add_option("-o,--out", sp_out, "Profile samples JSONL");

  // gen-trace
  auto* gt = app.add_subcommand("gen-trace", "Generate a Poisson trace from a task preset");
  std::string gt_task = "tool_agent", gt_out = "trace.jsonl";
  double gt_rate = 1.0, gt_duration_s = 600;
  std::uint64_t gt_seed = 1;
  gt->add_option("--task", gt_task, "Task preset or 'a+b' mix");
  gt->add_option("--rate", gt_rate, "Arrival rate (req/s)");
  gt->add_option("--duration-s", gt_duration_s, "Trace duration in seconds");
  gt->add_option("--seed", gt_seed, "Seed");
  gt->add_option("-o,--out", gt_out, "Trace JSONL");

  // gen-profile-plan
  auto* pp = app.add_subcommand("gen-profile-plan", "Write the co-run profiling plan");
  std::string pp_gpu = "a100", pp_out = "plan.jsonl";
  pp->add_option("-g,--gpu", pp_gpu, "a100 | h100");
  pp->add_option("-o,--out", pp_out, "Plan JSONL");

  // analyze
  auto* an = app.add_subcommand("analyze", "Summarize a run log");
  std::string an_log, an_timeline;
  an->add_option("-l,--log", an_log, "Run log JSONL")->required();
  an->add_option("--timeline", an_timeline, "Decision timeline CSV output");

  // default-config
  auto* dc = app.add_subcommand("default-config", "Print the default run config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      RunConfig cfg = config_or_default(run_config);
      if (!run_trace.empty()) cfg.workload.trace_path = run_trace;
      if (!run_scheduler.empty()) cfg.scheduler.kind = scheduler_from_string(run_scheduler);
      if (run_seed) cfg.workload.seed = run_seed;
      const Trace trace = make_trace(cfg.workload, cfg.slo);
      if (trace.requests.empty()) throw EmptyTrace("workload produced no requests");
      const ServingSetup setup = make_setup(cfg, cfg.workload.seed);
      const RunResult result = run_simulation(trace, setup, cfg.scheduler);
      const MetricsReport m = compute_metrics(result, trace, cfg.slo);
      const fs::path dir(run_out);
      {
        auto out = open_out(dir / "log.jsonl");
        write_run_log(out, result);
      }
      {
        auto out = open_out(dir / "requests.jsonl");
        write_request_metrics(out, result, trace);
      }
      {
        auto out = open_out(dir / "summary.csv");
        write_summary_header(out);
        write_summary_row(out, m, cfg.workload.rate_per_s, cfg.workload.seed);
      }
      {
        auto out = open_out(dir / "config.json");
        write_run_config(out, cfg);
      }
      print_report(m);
    } else if (*sw) {
      RunConfig cfg = config_or_default(sw_config);
      if (!sw_scheduler.empty()) cfg.scheduler.kind = scheduler_from_string(sw_scheduler);
      const auto curve = sweep(cfg, sw_rates, sw_seeds);
      auto out = open_out(sw_out);
      write_curve_csv(out, curve);
      std::printf("scheduler=%s goodput=%.4f req/s\n", std::string(to_string(cfg.scheduler.kind)).c_str(),
                  goodput(curve, cfg.slo));
    } else if (*cal) {
      std::ifstream in(cal_in);
      if (!in) throw ConfigError("cannot open " + cal_in);
      const auto samples = read_profile_samples(in);
      const GpuSpec gpu = gpu_preset(cal_gpu);
      const Calibration c = calibrate(samples, default_guard_axes(decode_partitions(gpu)), cal_cap, !cal_no_override);
      auto out = open_out(cal_out);
      write_calibration(out, c);
      std::printf("fitted %zu prefill and %zu decode SM counts; %zu guard cells populated\n", c.coeffs.prefill.size(),
                  c.coeffs.decode.size(), c.guard.populated_count());
    } else if (*sp) {
      const RunConfig cfg = config_or_default(sp_config);
      TruthModel truth = cfg.truth;
      truth.total_sms = cfg.gpu.total_sms;
      truth.device_count = cfg.gpu.device_count;
      const auto parts = decode_partitions(cfg.gpu);
      const auto sms = profiled_sms(parts, cfg.gpu.total_sms);
      auto samples = synth_solo_profiles(truth, Phase::Prefill, sms, sp_per, sp_noise, sp_seed);
      auto dec = synth_solo_profiles(truth, Phase::Decode, sms, sp_per, sp_noise, sp_seed + 1);
      const GuardAxes axes = default_guard_axes(parts);
      auto corun = synth_corun_profiles(truth, axes, gen_profile_plan(axes), sp_draws, sp_seed + 2);
      samples.insert(samples.end(), dec.begin(), dec.end());
      samples.insert(samples.end(), corun.begin(), corun.end());
      auto out = open_out(sp_out);
      write_profile_samples(out, samples);
      std::printf("wrote %zu samples\n", samples.size());
    } else if (*gt) {
      WorkloadConfig w;
      w.task = gt_task;
      w.rate_per_s = gt_rate;
      w.duration_us = static_cast<SimTime>(gt_duration_s * kSecUs);
      w.seed = gt_seed;
      const Trace trace = make_trace(w, SloTargets{});
      auto out = open_out(gt_out);
      write_trace(out, trace);
      std::printf("wrote %zu requests in %zu sessions\n", trace.requests.size(), trace.sessions.size());
    } else if (*pp) {
      const GpuSpec gpu = gpu_preset(pp_gpu);
      const auto plan = gen_profile_plan(default_guard_axes(decode_partitions(gpu)));
      auto out = open_out(pp_out);
      write_profile_plan(out, plan);
      std::printf("wrote %zu plan points\n", plan.size());
    } else if (*an) {
      std::ifstream in(an_log);
      if (!in) throw ConfigError("cannot open " + an_log);
      std::ofstream tl;
      if (!an_timeline.empty()) tl = open_out(an_timeline);
      const LogAnalysis a = analyze_log(in, an_timeline.empty() ? nullptr : &tl);
      std::printf("events=%zu decisions=%zu bubble_decode=%.4f bubble_prefill=%.4f bubble_mean=%.4f\n", a.events,
                  a.decisions, a.bubble_decode, a.bubble_prefill, a.bubble_mean);
    } else if (*dc) {
      write_run_config(std::cout, RunConfig{});
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
