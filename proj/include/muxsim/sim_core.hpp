#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <queue>
#include <string>
#include <string_view>
#include <vector>

namespace muxsim {

// Simulation clock, integer microseconds since simulation start.
using SimTime = std::int64_t;

inline constexpr SimTime kMsUs = 1000;
inline constexpr SimTime kSecUs = 1000 * 1000;
inline constexpr SimTime kNever = INT64_MAX;

enum class EventKind : std::uint8_t {
  RequestArrival,
  PrefillLayersDone,
  DecodeIterationDone,
  ReconfigDone,
  SyncPoll,
  MigrationDone,
};

std::string_view to_string(EventKind kind);
EventKind event_kind_from_string(std::string_view name);

// Kind-specific identifiers. Unused fields stay at -1 / 0 and are omitted
// from the log dump.
struct EventPayload {
  std::int64_t request = -1;
  std::int64_t batch = -1;
  std::int64_t partition = -1;
  std::int64_t layers = -1;
  std::int64_t lane = -1;
  std::uint64_t generation = 0;

  bool operator==(const EventPayload&) const = default;
};

struct EventRecord {
  SimTime time = 0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::RequestArrival;
  EventPayload payload;

  bool operator==(const EventRecord&) const = default;
};

// Min-queue on (time, seq). The sequence number is assigned at schedule time,
// so events at the same instant pop in the order they were scheduled.
class EventQueue {
 public:
  std::uint64_t push(SimTime time, EventKind kind, EventPayload payload);
  EventRecord pop();
  const EventRecord& top() const { return heap_.top(); }
  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }
  std::uint64_t next_seq() const { return next_seq_; }

 private:
  struct Later {
    bool operator()(const EventRecord& a, const EventRecord& b) const {
      if (a.time != b.time) return a.time > b.time;
      return a.seq > b.seq;
    }
  };
  std::priority_queue<EventRecord, std::vector<EventRecord>, Later> heap_;
  std::uint64_t next_seq_ = 0;
};

// Single-threaded discrete-event engine. Handlers may schedule further events
// through the simulator they receive.
class Simulator {
 public:
  using Handler = std::function<void(Simulator&, const EventRecord&)>;

  SimTime now() const { return now_; }

  // Throws PastEvent if time < now().
  std::uint64_t schedule(SimTime time, EventKind kind, EventPayload payload = {});
  std::uint64_t schedule_in(SimTime delay, EventKind kind, EventPayload payload = {}) {
    return schedule(now_ + delay, kind, payload);
  }

  // Processes every queued event with time <= t_end in (time, seq) order and
  // returns the records processed by this call. The full history stays
  // available through log().
  std::vector<EventRecord> run_until(SimTime t_end, const Handler& handler);

  // Like run_until but keeps the processed records only in log(); cheaper for
  // long runs.
  std::size_t drain_until(SimTime t_end, const Handler& handler);

  const std::vector<EventRecord>& log() const { return log_; }
  std::size_t pending() const { return queue_.size(); }
  std::uint64_t scheduled_count() const { return queue_.next_seq(); }
  void set_logging(bool enabled) { logging_ = enabled; }

 private:
  EventQueue queue_;
  SimTime now_ = 0;
  std::vector<EventRecord> log_;
  std::size_t processed_ = 0;
  bool logging_ = true;
};

// One JSON object per line: {"time_us":..,"seq":..,"kind":"..","payload":{..}}.
std::string event_to_json_line(const EventRecord& record);
EventRecord event_from_json_line(std::string_view line);
void write_event_log(std::ostream& out, const std::vector<EventRecord>& log);

}  // namespace muxsim
