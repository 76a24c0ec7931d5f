// Python module _muxsim. Configs cross the boundary as the same JSON text the
// CLI reads, so the Python side never mirrors the C++ structs.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "muxsim/cost_model.hpp"
#include "muxsim/errors.hpp"
#include "muxsim/gpu_model.hpp"
#include "muxsim/harness.hpp"
#include "muxsim/mux_scheduler.hpp"

namespace py = pybind11;
using namespace muxsim;

namespace {

RunConfig parse_config(const std::string& json) {
  if (json.empty()) return RunConfig{};
  std::istringstream in(json);
  return parse_run_config(in);
}

GpuSpec gpu_preset(const std::string& name) {
  if (name == "a100") return GpuSpec::a100();
  if (name == "h100") return GpuSpec::h100();
  throw ConfigError("unknown gpu preset: " + name);
}

py::dict summary(const LatencySummary& s) {
  py::dict d;
  d["p50"] = s.p50;
  d["p99"] = s.p99;
  d["avg"] = s.avg;
  d["count"] = s.count;
  return d;
}

py::dict report(const MetricsReport& m) {
  py::dict d;
  d["scheduler"] = m.scheduler;
  d["requests"] = m.requests;
  d["completed"] = m.completed;
  d["tokens_emitted"] = m.tokens_emitted;
  d["ttft_us"] = summary(m.ttft);
  d["tbt_us"] = summary(m.tbt);
  d["tpot_us"] = summary(m.tpot);
  d["e2e_us"] = summary(m.e2e);
  d["ttft_per_token_us"] = summary(m.ttft_per_token);
  d["decode_gap_us"] = summary(m.decode_gap);
  d["ttft_attainment"] = m.ttft_attainment;
  d["tbt_attainment"] = m.tbt_attainment;
  d["slo_attainment"] = m.slo_attainment;
  d["cache_hit_rate"] = m.cache.hit_rate();
  d["infeasible_iterations"] = m.infeasible_iterations;
  d["saturated"] = m.saturated;
  d["unstable"] = m.unstable;
  d["bubble_decode"] = m.bubble_decode;
  d["bubble_prefill"] = m.bubble_prefill;
  d["bubble_mean"] = m.bubble_mean;
  d["utilization"] = m.utilization;
  d["prefill_tokens"] = m.prefill_tokens;
  d["preemptions"] = m.preemptions;
  return d;
}

void apply_overrides(RunConfig& cfg, const std::optional<std::string>& scheduler,
                     const std::optional<std::uint64_t>& seed) {
  if (scheduler) cfg.scheduler.kind = scheduler_from_string(*scheduler);
  if (seed) cfg.workload.seed = *seed;
}

}  // namespace

PYBIND11_MODULE(_muxsim, m) {
  m.doc() = "Discrete-event simulator for intra-GPU prefill/decode multiplexing";

  // Translators run newest first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<SchemaError>(m, "SchemaError", PyExc_ValueError);

  m.def("default_config", [] {
    std::ostringstream out;
    write_run_config(out, RunConfig{});
    return out.str();
  });

  m.def("normalize_config", [](const std::string& json) {
    std::ostringstream out;
    write_run_config(out, parse_config(json));
    return out.str();
  }, py::arg("config_json"), "Parse, validate and re-serialize a run config.");

  m.def(
      "run",
      [](const std::string& json, std::optional<std::string> trace_path, std::optional<std::string> scheduler,
         std::optional<std::uint64_t> seed) {
        RunConfig cfg = parse_config(json);
        apply_overrides(cfg, scheduler, seed);
        if (trace_path) cfg.workload.trace_path = *trace_path;
        MetricsReport rep;
        {
          py::gil_scoped_release nogil;
          const Trace trace = make_trace(cfg.workload, cfg.slo);
          if (trace.requests.empty()) throw EmptyTrace("workload produced no requests");
          const RunResult r = run_simulation(trace, make_setup(cfg, cfg.workload.seed), cfg.scheduler);
          rep = compute_metrics(r, trace, cfg.slo);
        }
        return report(rep);
      },
      py::arg("config_json") = "", py::arg("trace_path") = py::none(), py::arg("scheduler") = py::none(),
      py::arg("seed") = py::none());

  m.def(
      "sweep",
      [](const std::string& json, const std::vector<double>& rates, const std::vector<std::uint64_t>& seeds,
         std::optional<std::string> scheduler) {
        RunConfig cfg = parse_config(json);
        apply_overrides(cfg, scheduler, std::nullopt);
        SloAttainmentCurve curve;
        {
          py::gil_scoped_release nogil;
          curve = sweep(cfg, rates, seeds);
        }
        py::list points;
        for (const auto& p : curve) {
          py::dict d;
          d["rate"] = p.rate;
          d["p99_ttft_us"] = p.p99_ttft;
          d["p99_tbt_us"] = p.p99_tbt;
          d["attainment"] = p.attainment;
          d["unstable"] = p.unstable;
          points.append(d);
        }
        py::dict out;
        out["points"] = points;
        out["goodput"] = goodput(curve, cfg.slo);
        return out;
      },
      py::arg("config_json"), py::arg("rates"), py::arg("seeds") = std::vector<std::uint64_t>{1},
      py::arg("scheduler") = py::none());

  m.def(
      "gen_trace",
      [](const std::string& task, double rate, double duration_s, std::uint64_t seed) {
        WorkloadConfig w;
        w.task = task;
        w.rate_per_s = rate;
        w.duration_us = static_cast<SimTime>(duration_s * kSecUs);
        w.seed = seed;
        const Trace t = make_trace(w, SloTargets{});
        py::list rows;
        for (const auto& r : t.requests) {
          py::dict d;
          d["id"] = r.id;
          d["session"] = r.session_id;
          d["turn"] = r.turn;
          d["arrival_us"] = r.arrival;
          d["n_new"] = r.n_new;
          d["n_reused"] = r.n_reused;
          d["n_out"] = r.n_out;
          rows.append(d);
        }
        return rows;
      },
      py::arg("task"), py::arg("rate"), py::arg("duration_s"), py::arg("seed") = 1);

  m.def("layers_to_launch", &layers_to_launch, py::arg("t_d"), py::arg("t_p"), py::arg("n_layers"),
        py::arg("layers_remaining"));
  m.def("percentile", &percentile, py::arg("samples"), py::arg("p"));
  m.def(
      "partition_count", [](const std::string& gpu) { return partition_configs(gpu_preset(gpu)).size(); },
      py::arg("gpu") = "a100");
  m.def(
      "profile_plan_size",
      [](const std::string& gpu) {
        return gen_profile_plan(default_guard_axes(decode_partitions(gpu_preset(gpu)))).size();
      },
      py::arg("gpu") = "a100");
}
