#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "muxsim/cost_model.hpp"

namespace muxsim {

// Hidden ground truth of the simulated hardware. Schedulers never read it;
// they see only the calibration derived from profiling it.
//
// theta_i(devices d, sms s) = theta_i(full) * (D/d)^device_exp_i * (S/s)^sm_exp_i
struct TruthModel {
  PrefillTheta prefill_full{{1.05e-3, 2.1e-3, 105.0, 50000.0}};
  DecodeTheta decode_full{{0.02, 20.0, 10000.0}};
  std::array<double, 4> prefill_sm_exp{1.0, 1.0, 0.5, 0.0};
  std::array<double, 3> decode_sm_exp{0.25, 0.5, 0.0};
  std::array<double, 4> prefill_device_exp{1.0, 1.0, 1.0, 0.0};
  std::array<double, 3> decode_device_exp{1.0, 1.0, 1.0};
  int total_sms = 108;
  int device_count = 8;

  // Per-cell true maximum decode slowdown lies in [1, contention_max].
  double contention_max = 1.2;
  std::uint64_t contention_seed = 7;
  // Prefill slowdown while co-running with decode, drawn from [1, max].
  double prefill_slowdown_max = 1.1;

  PrefillTheta prefill_at(int sms, int devices) const;
  DecodeTheta decode_at(int sms, int devices) const;
  PrefillTheta prefill_at(int sms) const { return prefill_at(sms, device_count); }
  DecodeTheta decode_at(int sms) const { return decode_at(sms, device_count); }

  // True maximum slowdown of a guard cell (deterministic in the seed).
  double cell_max(const GuardAxes& axes, const GuardCell& cell) const;

  // Coefficients the profiler would recover without noise.
  LatencyCoeffs exact_coeffs(const std::vector<int>& partitions) const;
  // Guard whose cells hold the true maxima.
  ContentionGuard exact_guard(const GuardAxes& axes, double cap = 1.3) const;
};

// Solo-run profiles per SM count with multiplicative uniform noise in
// [-noise, +noise].
std::vector<ProfileSample> synth_solo_profiles(const TruthModel& truth, Phase phase,
                                               const std::vector<int>& sms_list,
                                               std::size_t per_sms, double noise,
                                               std::uint64_t seed);

// Co-run decode samples for every plan point, `draws` slowdown draws each.
std::vector<ProfileSample> synth_corun_profiles(const TruthModel& truth, const GuardAxes& axes,
                                                const std::vector<ProfilePoint>& plan,
                                                int draws, std::uint64_t seed);

// SM counts that occur as a side of some partition, plus the full device.
std::vector<int> profiled_sms(const std::vector<int>& decode_partitions, int total_sms);

}  // namespace muxsim
