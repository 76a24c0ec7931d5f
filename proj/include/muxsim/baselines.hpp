#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "muxsim/cost_model.hpp"
#include "muxsim/serving.hpp"
#include "muxsim/workload.hpp"

namespace muxsim {

enum class FusedModel : std::uint8_t { Compositional, Anchor };

// Two-point linear step model T(tokens) = base + per_token * tokens, in us.
struct AnchorModel {
  double base_us = 73000.0;
  double per_token_us = 105.46875;

  static AnchorModel from_points(Tokens b1, SimTime t1_us, Tokens b2, SimTime t2_us);
  SimTime step_us(Tokens tokens) const;
};

struct ChunkedConfig {
  Tokens token_budget = 256;
  FusedModel model = FusedModel::Compositional;
  AnchorModel anchor;
  SimTime decode_launch_us = 500;  // compositional model only
};

// Duration of one fused step: a prefill chunk (possibly spanning several
// requests) plus one decode iteration over `decode_r`.
SimTime fused_step_us(const ChunkedConfig& cfg, std::span<const PrefillItem> chunk,
                      std::span<const Tokens> decode_r, const PrefillTheta& prefill,
                      const DecodeTheta& decode);

RunResult run_chunked(const Trace& trace, const ServingSetup& setup, const ChunkedConfig& cfg);

// Largest candidate budget whose simulated P99 TBT stays within the SLO, or 0
// if none does.
Tokens tune_token_budget(const Trace& trace, const ServingSetup& setup, ChunkedConfig cfg,
                         std::span<const Tokens> candidates);

struct DisaggConfig {
  int prefill_devices = 0;  // 0 means half of the devices
  SimTime prefill_launch_us = 10 * kMsUs;
  SimTime decode_launch_us = 500;
  Tokens max_prefill_tokens = 16384;
};

RunResult run_static_pd(const Trace& trace, const ServingSetup& setup, const DisaggConfig& cfg = {});

struct ElasticConfig {
  int decode_devices = 0;  // 0 means half of the devices
  Tokens tokens_per_device = 32768;
  SimTime prefill_launch_us = 10 * kMsUs;
  SimTime decode_launch_us = 500;
};

// ceil(L / tokens_per_device) clamped to [1, available].
int elastic_prefill_devices(Tokens total_len, const ElasticConfig& cfg, int available);

RunResult run_elastic(const Trace& trace, const ServingSetup& setup, const ElasticConfig& cfg = {});

}  // namespace muxsim
