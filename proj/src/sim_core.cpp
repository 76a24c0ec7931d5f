#include "muxsim/sim_core.hpp"

#include <array>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "muxsim/errors.hpp"

namespace muxsim {

namespace {

constexpr std::array<std::string_view, 6> kKindNames = {
    "RequestArrival", "PrefillLayersDone", "DecodeIterationDone",
    "ReconfigDone",   "SyncPoll",          "MigrationDone",
};

}  // namespace

std::string_view to_string(EventKind kind) {
  return kKindNames[static_cast<std::size_t>(kind)];
}

EventKind event_kind_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == name) return static_cast<EventKind>(i);
  }
  throw SchemaError("unknown event kind: " + std::string(name));
}

std::uint64_t EventQueue::push(SimTime time, EventKind kind, EventPayload payload) {
  const std::uint64_t seq = next_seq_++;
  heap_.push(EventRecord{time, seq, kind, payload});
  return seq;
}

EventRecord EventQueue::pop() {
  EventRecord top = heap_.top();
  heap_.pop();
  return top;
}

std::uint64_t Simulator::schedule(SimTime time, EventKind kind, EventPayload payload) {
  if (time < now_) {
    throw PastEvent("event at t=" + std::to_string(time) +
                    " scheduled from now=" + std::to_string(now_));
  }
  return queue_.push(time, kind, payload);
}

std::size_t Simulator::drain_until(SimTime t_end, const Handler& handler) {
  std::size_t count = 0;
  while (!queue_.empty() && queue_.top().time <= t_end) {
    EventRecord ev = queue_.pop();
    now_ = ev.time;
    if (logging_) log_.push_back(ev);
    ++count;
    handler(*this, ev);
  }
  processed_ += count;
  return count;
}

std::vector<EventRecord> Simulator::run_until(SimTime t_end, const Handler& handler) {
  const bool was_logging = logging_;
  logging_ = true;
  const std::size_t first = log_.size();
  drain_until(t_end, handler);
  logging_ = was_logging;
  return {log_.begin() + static_cast<std::ptrdiff_t>(first), log_.end()};
}

std::string event_to_json_line(const EventRecord& record) {
  nlohmann::ordered_json payload = nlohmann::ordered_json::object();
  const EventPayload& p = record.payload;
  if (p.request >= 0) payload["request"] = p.request;
  if (p.batch >= 0) payload["batch"] = p.batch;
  if (p.partition >= 0) payload["partition"] = p.partition;
  if (p.layers >= 0) payload["layers"] = p.layers;
  if (p.lane >= 0) payload["lane"] = p.lane;
  if (p.generation != 0) payload["generation"] = p.generation;

  nlohmann::ordered_json line;
  line["time_us"] = record.time;
  line["seq"] = record.seq;
  line["kind"] = to_string(record.kind);
  line["payload"] = std::move(payload);
  return line.dump();
}

EventRecord event_from_json_line(std::string_view line) {
  EventRecord rec;
  try {
    const auto j = nlohmann::json::parse(line);
    rec.time = j.at("time_us").get<SimTime>();
    rec.seq = j.at("seq").get<std::uint64_t>();
    rec.kind = event_kind_from_string(j.at("kind").get<std::string>());
    const auto& p = j.at("payload");
    rec.payload.request = p.value("request", std::int64_t{-1});
    rec.payload.batch = p.value("batch", std::int64_t{-1});
    rec.payload.partition = p.value("partition", std::int64_t{-1});
    rec.payload.layers = p.value("layers", std::int64_t{-1});
    rec.payload.lane = p.value("lane", std::int64_t{-1});
    rec.payload.generation = p.value("generation", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("bad event record: ") + e.what());
  }
  return rec;
}

void write_event_log(std::ostream& out, const std::vector<EventRecord>& log) {
  for (const auto& rec : log) out << "{\"type\":\"event\"," << event_to_json_line(rec).substr(1) << '\n';
}

}  // namespace muxsim
