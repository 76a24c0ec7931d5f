#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "muxsim/sim_core.hpp"

namespace muxsim {

using Tokens = std::int64_t;

// One inference request. n_out is hidden from schedulers; it is only
// revealed token by token as decode iterations complete.
struct Request {
  std::string id;
  std::string session_id;
  std::int64_t session = -1;  // dense index into Trace::sessions
  int turn = 0;               // 0-based position inside its session
  SimTime arrival = 0;
  Tokens n_new = 1;
  Tokens n_reused = 0;
  Tokens n_out = 1;
  SimTime ttft_slo = 0;
  SimTime tbt_slo = 0;

  Tokens total_len() const { return n_new + n_reused; }
};

struct Session {
  std::string id;
  std::vector<std::size_t> turns;   // request indices, in issue order
  Tokens accumulated_context = 0;   // context after the last turn (inputs + outputs)
};

struct Trace {
  std::vector<Request> requests;  // sorted by arrival
  std::vector<Session> sessions;

  // Index of the previous turn of the same session, if any.
  std::optional<std::size_t> previous_turn(std::size_t request) const;
};

// min/mean/max of one length metric.
struct LengthDist {
  double min = 1;
  double mean = 1;
  double max = 1;
};

// Length shape of a task, matching the min/mean/max table of typical tasks.
// `reused` is absent for tasks without context reuse.
struct DistSpec {
  LengthDist input;
  LengthDist output;
  std::optional<LengthDist> reused;
};

// Samples round(clamp(exp(N(mu, sigma)), min, max)) with sigma = ln(max/mean)/3
// and mu solved so that the clamped mean equals the requested mean.
class ClampedLogNormal {
 public:
  explicit ClampedLogNormal(const LengthDist& dist);

  Tokens sample(std::mt19937_64& rng) const;
  double mu() const { return mu_; }
  double sigma() const { return sigma_; }
  // Mean of the continuous clamped distribution (before rounding).
  double analytic_mean() const;

 private:
  LengthDist dist_;
  double mu_ = 0;
  double sigma_ = 0;
  bool constant_ = false;
};

struct PoissonArrivals {
  double rate_per_s = 1.0;
  std::uint64_t seed = 0;
  SimTime duration = 100 * kSecUs;
};

struct ExplicitArrivals {
  std::vector<SimTime> times;
};

struct ExplicitLengths {
  struct Entry {
    Tokens n_new = 1;
    Tokens n_reused = 0;
    Tokens n_out = 1;
  };
  std::vector<Entry> entries;
};

struct MultiTurnSpec {
  LengthDist turns{1, 3.5, 10};
  LengthDist think_time_us{1 * kSecUs, 10 * kSecUs, 60 * kSecUs};
  // A session ends once its context would exceed this many tokens.
  Tokens context_cap = 128 * 1024;
};

struct TraceSpec {
  std::variant<PoissonArrivals, ExplicitArrivals> arrivals;
  std::variant<DistSpec, ExplicitLengths> lengths;
  std::optional<MultiTurnSpec> multi_turn;
  SimTime ttft_slo = 5 * kSecUs;
  double ttft_slo_per_token_us = 0.0;  // added per input token
  SimTime tbt_slo = 100 * kMsUs;
  std::uint64_t length_seed = 0;  // 0 means "derive from the arrival seed"
};

// Presets shaped after the five typical tasks (ShareGPT, LooGLE, OpenThoughts,
// Conversation, Tool&Agent).
DistSpec task_dist(std::string_view task);
std::optional<MultiTurnSpec> task_multi_turn(std::string_view task);
std::vector<std::string> task_names();

Trace gen_poisson(const TraceSpec& spec);

enum class ReuseMode {
  Reconstruct,  // later turns reuse the whole accumulated session context
  AsGiven,      // keep the file's n_reused
};

Trace load_trace(const std::string& path, ReuseMode mode = ReuseMode::Reconstruct,
                 SimTime ttft_slo = 5 * kSecUs, SimTime tbt_slo = 100 * kMsUs);
Trace parse_trace(std::istream& in, ReuseMode mode = ReuseMode::Reconstruct,
                  SimTime ttft_slo = 5 * kSecUs, SimTime tbt_slo = 100 * kMsUs);
void write_trace(std::ostream& out, const Trace& trace);
void save_trace(const std::string& path, const Trace& trace);

// Rebuilds session membership and turn numbering from session ids. Requests
// must already be sorted by arrival.
void link_sessions(Trace& trace, ReuseMode mode);

struct FieldStats {
  double min = 0;
  double mean = 0;
  double max = 0;
};

struct TraceStats {
  FieldStats input;   // n_new + n_reused
  FieldStats output;  // n_out
  FieldStats reused;  // n_reused
  std::size_t count = 0;
};

TraceStats trace_stats(const std::vector<Request>& requests);

// Merges two traces (e.g. a 50/50 short/long mix), re-sorting by arrival and
// prefixing ids so sessions stay distinct.
Trace merge_traces(const Trace& a, const Trace& b);

}  // namespace muxsim
