#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muxsim/sim_core.hpp"
#include "muxsim/workload.hpp"

namespace muxsim {

struct ModelSpec {
  std::string name = "llama-70b";
  int n_layers = 80;
  int hidden_dim = 8192;  // informational; absorbed into the coefficients
  double kv_bytes_per_token = 160000.0;
};

enum class Phase : std::uint8_t { Prefill, Decode };

std::string_view to_string(Phase phase);
Phase phase_from_string(std::string_view name);

// One request inside a prefill batch: new tokens to compute and reused
// (cached) tokens they attend to.
struct PrefillItem {
  Tokens n = 1;
  Tokens r = 0;
};

// T = t1*sum(n^2) + t2*sum(n*r) + t3*sum(n) + t4, in microseconds.
struct PrefillTheta {
  std::array<double, 4> t{0, 0, 0, 0};
  bool operator==(const PrefillTheta&) const = default;
};

// T = t1*sum(r) + t2*bs + t3, in microseconds.
struct DecodeTheta {
  std::array<double, 3> t{0, 0, 0};
  bool operator==(const DecodeTheta&) const = default;
};

// Aggregated prefill features; the polynomial only needs these sums.
struct PrefillFeatures {
  double sum_n2 = 0;
  double sum_nr = 0;
  double sum_n = 0;

  static PrefillFeatures of(std::span<const PrefillItem> batch);
  void add(const PrefillItem& item);
};

double prefill_us(const PrefillFeatures& f, const PrefillTheta& theta);
double decode_us(double sum_r, std::int64_t bs, const DecodeTheta& theta);

// Rounded to the nearest microsecond. Throw EmptyBatch on an empty batch.
SimTime predict_prefill(std::span<const PrefillItem> batch, const PrefillTheta& theta);
SimTime predict_decode(std::span<const Tokens> reused, const DecodeTheta& theta);

// Coefficients per SM count of the side a phase runs on. The full-device
// entry (all SMs) serves prefill when no decode is co-running.
struct LatencyCoeffs {
  std::map<int, PrefillTheta> prefill;
  std::map<int, DecodeTheta> decode;

  const PrefillTheta& prefill_at(int sms) const;
  const DecodeTheta& decode_at(int sms) const;
};

// Descriptor of the phase co-running with a profiled one.
struct CoRunPeer {
  Tokens prefill_n = 0;
  Tokens prefill_r = 0;
  Tokens decode_r = 0;
  std::int64_t bs = 0;
};

struct ProfileSample {
  Phase phase = Phase::Prefill;
  int sms = 0;
  std::vector<PrefillItem> prefill;  // prefill samples
  std::vector<Tokens> decode_r;      // decode samples
  double latency_us = 0;
  std::optional<CoRunPeer> peer;
};

struct FitResult {
  std::vector<double> theta;
  double max_holdout_deviation = 0;
  std::size_t train_count = 0;
  std::size_t holdout_count = 0;
};

// Non-negative least squares fit of the phase polynomial to the solo samples
// of one (phase, sms) pair. Every fifth sample is held out when there are at
// least twice as many samples as coefficients. Throws Degenerate when the
// design matrix is rank deficient.
FitResult fit(std::span<const ProfileSample> samples, Phase phase, int sms);

// Lawson-Hanson NNLS: argmin ||A x - b|| subject to x >= 0. A is row-major,
// rows x cols.
std::vector<double> nnls(const std::vector<double>& a, std::size_t rows, std::size_t cols,
                         const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Contention guard

enum class DecodeKey : std::uint8_t { MaxReused, TotalReused };

struct GuardAxes {
  std::vector<Tokens> prefill_n{2048, 8192, 32768, 131072};
  std::vector<Tokens> prefill_r{2048, 8192, 32768, 131072};
  std::vector<Tokens> decode_r{2048, 8192, 32768, 131072};
  std::vector<std::int64_t> batch_sizes{1,  2,  4,  8,   16,  24,  32,  40,  48,  56,
                                        64, 80, 96, 112, 128, 160, 192, 224, 256, 512};
  std::vector<int> partitions;  // decode SM counts of the partition configs

  std::size_t cell_count() const;
  bool operator==(const GuardAxes&) const = default;
};

GuardAxes default_guard_axes(std::vector<int> partitions);

struct GuardCell {
  std::size_t prefill_n = 0;
  std::size_t prefill_r = 0;
  std::size_t decode_r = 0;
  std::size_t bs = 0;
  std::size_t partition = 0;
  bool operator==(const GuardCell&) const = default;
};

// Smallest grid point >= value, clamped to the top point.
std::size_t bin_ceiling(std::span<const std::int64_t> points, std::int64_t value);

class ContentionGuard {
 public:
  explicit ContentionGuard(GuardAxes axes = {}, double cap = 1.3, bool cap_override = true,
                           DecodeKey key = DecodeKey::MaxReused);

  const GuardAxes& axes() const { return axes_; }
  double cap() const { return cap_; }
  bool cap_override() const { return cap_override_; }
  DecodeKey decode_key() const { return key_; }

  GuardCell cell(Tokens prefill_n, Tokens prefill_r, Tokens decode_key_value, std::int64_t bs,
                 std::size_t partition_index) const;
  std::size_t flat(const GuardCell& c) const;
  GuardCell unflat(std::size_t index) const;

  // Populated factor, or the cap for cells never profiled.
  double max_slowdown(const GuardCell& c) const;
  bool populated(const GuardCell& c) const;
  // Stores a profiled factor directly (clamped to >= 1).
  void set(const GuardCell& c, double factor);
  // Monotone update with a runtime observation. An unpopulated cell takes the
  // observation; a populated one keeps the larger value.
  void refine(const GuardCell& c, double observed);

  std::size_t populated_count() const;
  // Raw storage: 0 marks an unpopulated cell.
  const std::vector<double>& raw() const { return cells_; }

 private:
  double clamp_observation(double observed) const;

  GuardAxes axes_;
  double cap_;
  bool cap_override_;
  DecodeKey key_;
  std::vector<double> cells_;
};

struct WorstCaseEstimate {
  SimTime solo_us = 0;
  double factor = 1.0;
  SimTime worst_us = 0;
};

// Describes the prefill batch co-running with a decode iteration.
struct PrefillDescriptor {
  Tokens n = 0;
  Tokens r = 0;
};

// Worst-case decode latency on one partition: solo prediction times the guard
// factor of the cell, or the solo prediction when nothing co-runs.
WorstCaseEstimate worst_case_decode(double sum_r, Tokens max_r, std::int64_t bs,
                                    std::size_t partition_index, const DecodeTheta& theta,
                                    const ContentionGuard& guard,
                                    const std::optional<PrefillDescriptor>& corun);
WorstCaseEstimate worst_case_decode(std::span<const Tokens> reused, std::size_t partition_index,
                                    const DecodeTheta& theta, const ContentionGuard& guard,
                                    const std::optional<PrefillDescriptor>& corun);

// Multiplies without letting floating error push an exact product up by 1us.
SimTime inflate(SimTime solo_us, double factor);

struct ProfilePoint {
  int partition = 0;  // decode SMs
  Tokens prefill_n = 0;
  Tokens prefill_r = 0;
  Tokens decode_r = 0;
  std::int64_t bs = 0;
};

// Co-run sampling plan: prefill (n x r) grid without the (top, top) cell,
// times decode r bins, batch-size bins and partitions.
std::vector<ProfilePoint> gen_profile_plan(const GuardAxes& axes);
void write_profile_plan(std::ostream& out, const std::vector<ProfilePoint>& plan);

// ---------------------------------------------------------------------------
// Calibration file

struct Calibration {
  LatencyCoeffs coeffs;
  ContentionGuard guard;
};

void write_calibration(std::ostream& out, const Calibration& cal);
Calibration read_calibration(std::istream& in);
void save_calibration(const std::string& path, const Calibration& cal);
Calibration load_calibration(const std::string& path);

void write_profile_samples(std::ostream& out, std::span<const ProfileSample> samples);
std::vector<ProfileSample> read_profile_samples(std::istream& in);

// Fits every (phase, sms) group of solo samples and folds co-run samples
// into a guard built on `axes`.
Calibration calibrate(std::span<const ProfileSample> samples, const GuardAxes& axes,
                      double cap = 1.3, bool cap_override = true);

}  // namespace muxsim
