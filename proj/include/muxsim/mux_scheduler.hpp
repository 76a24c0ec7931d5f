#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "muxsim/cost_model.hpp"
#include "muxsim/gpu_model.hpp"
#include "muxsim/serving.hpp"
#include "muxsim/workload.hpp"

namespace muxsim {

struct MuxParams {
  bool layerwise = true;
  bool preemption = true;
  SimTime poll_interval_us = 0;  // 0 merges at every decode boundary
  SimTime decode_launch_us = 500;
  SimTime group_launch_base_us = 500;
  double group_launch_per_layer_us = 118.75;  // 80 layers -> 10 ms with the base
  SimTime full_launch_us = 10 * kMsUs;        // whole-job launch when layerwise is off
  Tokens max_prefill_tokens = 16384;
  int max_outstanding_groups = 2;
  // Layer-group length target while no decode runs; 0 means tbt_slo / 2.
  SimTime idle_group_target_us = 0;
};

// N_PL = ceil(t_d * n_layers / t_p), clamped to [1, layers_remaining]. Zero
// when nothing remains.
int layers_to_launch(SimTime t_d, SimTime t_p, int n_layers, int layers_remaining);

struct DecodeBatchView {
  double sum_r = 0;
  Tokens max_r = 0;
  std::int64_t bs = 0;
};

// Worst case over every co-running prefill descriptor (solo if none).
WorstCaseEstimate worst_case_on(const DecodeBatchView& batch, std::size_t partition_index,
                                int decode_sms, const LatencyCoeffs& coeffs,
                                const ContentionGuard& guard,
                                std::span<const PrefillDescriptor> corun);

// Index of the smallest decode partition whose worst case fits `budget_us`.
std::optional<std::size_t> try_best_fit_partition(const DecodeBatchView& batch,
                                                  std::span<const PrefillDescriptor> corun,
                                                  SimTime budget_us,
                                                  std::span<const PartitionConfig> configs,
                                                  const LatencyCoeffs& coeffs,
                                                  const ContentionGuard& guard);
// Same, but throws Infeasible when no partition fits.
std::size_t best_fit_partition(const DecodeBatchView& batch, std::span<const PrefillDescriptor> corun,
                               SimTime budget_us, std::span<const PartitionConfig> configs,
                               const LatencyCoeffs& coeffs, const ContentionGuard& guard);

// Admission test for preempting the active prefill job. The victim must not
// be a preemptor itself, no job may already be suspended, and the victim must
// still meet its deadline after the incoming job runs first.
bool try_preempt(bool active_is_preemptor, bool suspended_exists, SimTime now,
                 SimTime active_deadline, SimTime active_remaining_us, SimTime incoming_us);

RunResult run_mux(const Trace& trace, const ServingSetup& setup, const MuxParams& params = {});

}  // namespace muxsim
