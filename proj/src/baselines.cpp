#include "muxsim/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>

#include "muxsim/errors.hpp"

namespace muxsim {

AnchorModel AnchorModel::from_points(Tokens b1, SimTime t1_us, Tokens b2, SimTime t2_us) {
  if (b1 == b2) throw Degenerate("anchor points need distinct budgets");
  AnchorModel m;
  m.per_token_us = static_cast<double>(t2_us - t1_us) / static_cast<double>(b2 - b1);
  m.base_us = static_cast<double>(t1_us) - m.per_token_us * static_cast<double>(b1);
  return m;
}

SimTime AnchorModel::step_us(Tokens tokens) const {
  return std::llround(base_us + per_token_us * static_cast<double>(tokens));
}

SimTime fused_step_us(const ChunkedConfig& cfg, std::span<const PrefillItem> chunk,
                      std::span<const Tokens> decode_r, const PrefillTheta& prefill,
                      const DecodeTheta& decode) {
  if (chunk.empty() && decode_r.empty()) return 0;
  if (cfg.model == FusedModel::Anchor) {
    Tokens tokens = static_cast<Tokens>(decode_r.size());
    for (const auto& c : chunk) tokens += c.n;
    return cfg.anchor.step_us(tokens);
  }
  double us = static_cast<double>(cfg.decode_launch_us);
  if (!chunk.empty()) us += prefill_us(PrefillFeatures::of(chunk), prefill);
  if (!decode_r.empty()) {
    double sum = 0;
    for (Tokens r : decode_r) sum += static_cast<double>(r);
    us += decode_us(sum, static_cast<std::int64_t>(decode_r.size()), decode);
  }
  return std::llround(us);
}

int elastic_prefill_devices(Tokens total_len, const ElasticConfig& cfg, int available) {
  if (available < 1) throw ConfigError("elastic prefill needs at least one device");
  const Tokens per = std::max<Tokens>(1, cfg.tokens_per_device);
  const auto k = static_cast<int>((total_len + per - 1) / per);
  return std::clamp(k, 1, available);
}

namespace {

struct Active {
  std::size_t req = 0;
  Tokens ctx = 0;
  Tokens emitted = 0;
};

// Shared request plumbing: arrivals, session gating and the simulator loop.
class EngineBase {
 public:
  EngineBase(const Trace& trace, const ServingSetup& setup, std::string name)
      : trace_(trace), setup_(setup), rec_(trace, setup.record_events), gate_(trace) {
    sim_.set_logging(setup.record_events);
    rec_.result().scheduler = std::move(name);
    rec_.result().n_layers = setup.model.n_layers;
  }
  virtual ~EngineBase() = default;

  RunResult run() {
    SimTime last = 0;
    for (std::size_t i = 0; i < trace_.requests.size(); ++i) {
      sim_.schedule(trace_.requests[i].arrival, EventKind::RequestArrival,
                    EventPayload{.request = static_cast<std::int64_t>(i)});
      last = std::max(last, trace_.requests[i].arrival);
    }
    const SimTime horizon = setup_.drain_horizon_us > 0 ? last + setup_.drain_horizon_us : kNever;
    sim_.drain_until(horizon, [this](Simulator&, const EventRecord& ev) {
      if (ev.kind == EventKind::RequestArrival) {
        const auto i = static_cast<std::size_t>(ev.payload.request);
        if (gate_.on_arrival(i)) release(i, ev.time);
      } else {
        handle(ev);
      }
    });
    rec_.finalize(trace_, sim_, cache_stats());
    return std::move(rec_.result());
  }

 protected:
  virtual void handle(const EventRecord& ev) = 0;
  virtual void on_release(std::size_t i, SimTime now) = 0;
  virtual CacheStats cache_stats() const = 0;
  virtual Tokens max_request_tokens() const = 0;

  void release(std::size_t i, SimTime now) {
    out(i).release = now;
    const Request& r = req(i);
    if (r.total_len() + r.n_out > max_request_tokens()) {
      rec_.decision(now, "Drop", {{"request", static_cast<std::int64_t>(i)}});
      if (auto next = gate_.on_finish(i)) release(*next, now);
      return;
    }
    on_release(i, now);
  }

  void finish(std::size_t i, SimTime now) {
    rec_.finish(i, now);
    on_finished(i, now);
    if (auto next = gate_.on_finish(i)) release(*next, now);
  }
  virtual void on_finished(std::size_t i, SimTime now) = 0;

  const Request& req(std::size_t i) const { return trace_.requests[i]; }
  RequestOutcome& out(std::size_t i) { return rec_.result().requests[i]; }

  const Trace& trace_;
  const ServingSetup& setup_;
  Recorder rec_;
  SessionGate gate_;
  Simulator sim_;
};

// Continuous decode iterations on a fixed set of devices.
class DecodeLane {
 public:
  DecodeLane(Simulator& sim, Recorder& rec, DecodeTheta truth, SimTime launch_us, double share,
             std::int64_t lane)
      : sim_(sim), rec_(rec), truth_(truth), launch_us_(launch_us), share_(share), lane_(lane) {}

  void join(std::size_t req, Tokens ctx, SimTime now) {
    pending_.push_back({req, ctx, 1});
    if (!running_) start(now);
  }

  bool running() const { return running_; }

  // Emits one token per member; returns (emitted, finished) requests.
  std::vector<Active> on_done(SimTime now) {
    running_ = false;
    std::vector<Active> emitted;
    for (auto& a : batch_) {
      ++a.emitted;
      ++a.ctx;
      rec_.token(a.req, now);
      emitted.push_back(a);
    }
    return emitted;
  }

  void drop(std::size_t req) {
    batch_.erase(std::remove_if(batch_.begin(), batch_.end(), [req](const Active& a) { return a.req == req; }),
                 batch_.end());
  }

  void start(SimTime now) {
    if (running_) return;
    for (const auto& p : pending_) {
      batch_.push_back(p);
      rec_.result().requests[p.req].merged = now;
    }
    pending_.clear();
    if (batch_.empty()) return;
    double sum = 0;
    for (const auto& a : batch_) sum += static_cast<double>(a.ctx);
    const auto bs = static_cast<std::int64_t>(batch_.size());
    const SimTime solo = std::max<SimTime>(1, std::llround(decode_us(sum, bs, truth_)));
    const SimTime begin = now + launch_us_;
    const SimTime end = begin + solo;
    running_ = true;
    rec_.busy(Side::Decode, begin, end, share_);
    IterationRecord it;
    it.start = begin;
    it.end = end;
    it.bs = bs;
    it.predicted_us = solo;
    it.worst_us = solo;
    rec_.result().iterations.push_back(it);
    sim_.schedule(end, EventKind::DecodeIterationDone, EventPayload{.lane = lane_});
  }

 private:
  Simulator& sim_;
  Recorder& rec_;
  DecodeTheta truth_;
  SimTime launch_us_;
  double share_;
  std::int64_t lane_;
  std::vector<Active> batch_;
  std::vector<Active> pending_;
  bool running_ = false;
};

// ---------------------------------------------------------------------------
// Chunked prefill

class ChunkedEngine final : public EngineBase {
 public:
  ChunkedEngine(const Trace& trace, const ServingSetup& setup, const ChunkedConfig& cfg)
      : EngineBase(trace, setup, "chunked"),
        cfg_(cfg),
        pool_(setup.gpu.kv_pool_tokens),
        prefill_theta_(setup.truth.prefill_at(setup.gpu.total_sms, setup.gpu.device_count)),
        decode_theta_(setup.truth.decode_at(setup.gpu.total_sms, setup.gpu.device_count)) {
    if (cfg_.token_budget < 1) throw ConfigError("token budget must be >= 1");
  }

 private:
  struct Pending {
    std::size_t req = 0;
    Tokens remaining = 0;
    Tokens processed = 0;
    Tokens hit = 0;
    bool admitted = false;
  };

  CacheStats cache_stats() const override { return pool_.stats(); }
  Tokens max_request_tokens() const override { return pool_.capacity(); }

  void on_release(std::size_t i, SimTime now) override {
    prefill_.push_back({i, 0, 0, 0, false});
    if (!running_) step(now);
  }

  void on_finished(std::size_t i, SimTime) override { pool_.unpin_all(req(i).session); }

  void handle(const EventRecord& ev) override {
    if (ev.kind != EventKind::DecodeIterationDone) return;
    const SimTime now = ev.time;
    running_ = false;
    std::vector<Active> kept;
    for (auto& a : decode_) {
      ++a.emitted;
      ++a.ctx;
      rec_.token(a.req, now);
      append(a.req, now);
      if (a.emitted >= req(a.req).n_out) {
        finish(a.req, now);
      } else {
        kept.push_back(a);
      }
    }
    decode_ = std::move(kept);
    for (std::size_t i : completing_) {
      out(i).prefill_done = now;
      rec_.token(i, now);
      append(i, now);
      if (req(i).n_out <= 1) {
        finish(i, now);
      } else {
        decode_.push_back({i, req(i).total_len() + 1, 1});
        out(i).merged = now;
      }
    }
    completing_.clear();
    step(now);
  }

  void append(std::size_t i, SimTime now) {
    const auto s = req(i).session;
    if (pool_.can_insert(s, 1)) pool_.cache_insert(s, 1, true, now);
  }

  bool admit(Pending& p, SimTime now) {
    const Request& r = req(p.req);
    const Tokens cached = pool_.cache_peek(r.session);
    const Tokens need = std::max<Tokens>(0, r.total_len() - cached);
    if (!pool_.can_insert(r.session, need)) return false;
    p.hit = pool_.cache_lookup(r.session, r.n_reused, now);
    pool_.pin_all(r.session);
    pool_.cache_insert(r.session, need, true, now);
    p.remaining = r.n_new + (r.n_reused - p.hit);
    p.admitted = true;
    out(p.req).hit_tokens = p.hit;
    out(p.req).prefill_tokens = p.remaining;
    return true;
  }

  void step(SimTime now) {
    if (running_) return;
    const auto bs = static_cast<Tokens>(decode_.size());
    Tokens room = cfg_.token_budget - bs;
    std::vector<PrefillItem> chunk;
    while (room > 0 && !prefill_.empty()) {
      Pending& p = prefill_.front();
      if (!p.admitted && !admit(p, now)) break;
      const Tokens c = std::min(room, p.remaining);
      chunk.push_back({c, p.hit + p.processed});
      p.processed += c;
      p.remaining -= c;
      room -= c;
      if (p.remaining == 0) {
        out(p.req).layers_done = setup_.model.n_layers;
        completing_.push_back(p.req);
        prefill_.pop_front();
      }
    }
    if (chunk.empty() && decode_.empty()) return;
    std::vector<Tokens> rs;
    rs.reserve(decode_.size());
    for (const auto& a : decode_) rs.push_back(a.ctx);
    const SimTime dur = std::max<SimTime>(1, fused_step_us(cfg_, chunk, rs, prefill_theta_, decode_theta_));
    running_ = true;
    rec_.busy(Side::Decode, now, now + dur, 1.0);
    IterationRecord it;
    it.start = now;
    it.end = now + dur;
    it.bs = bs;
    it.decode_sms = setup_.gpu.total_sms;
    it.predicted_us = dur;
    it.worst_us = dur;
    rec_.result().iterations.push_back(it);
    Tokens chunk_tokens = 0;
    Tokens chunk_reused = 0;
    for (const auto& c : chunk) {
      chunk_tokens += c.n;
      chunk_reused = std::max(chunk_reused, c.r);
    }
    rec_.decision(now, "FusedStep",
                  {{"bs", bs}, {"chunk", chunk_tokens}, {"reused", chunk_reused}, {"duration_us", dur}});
    sim_.schedule(now + dur, EventKind::DecodeIterationDone);
  }

  ChunkedConfig cfg_;
  KvCachePool pool_;
  PrefillTheta prefill_theta_;
  DecodeTheta decode_theta_;
  std::deque<Pending> prefill_;
  std::vector<std::size_t> completing_;
  std::vector<Active> decode_;
  bool running_ = false;
};

// ---------------------------------------------------------------------------
// Static disaggregation

class StaticPdEngine final : public EngineBase {
 public:
  StaticPdEngine(const Trace& trace, const ServingSetup& setup, const DisaggConfig& cfg)
      : EngineBase(trace, setup, "static-pd"),
        cfg_(cfg),
        dp_(cfg.prefill_devices > 0 ? cfg.prefill_devices : setup.gpu.device_count / 2),
        dd_(setup.gpu.device_count - dp_),
        pool_p_(setup.gpu.kv_pool_tokens * dp_ / setup.gpu.device_count),
        pool_d_(setup.gpu.kv_pool_tokens - setup.gpu.kv_pool_tokens * dp_ / setup.gpu.device_count),
        prefill_theta_(setup.truth.prefill_at(setup.gpu.total_sms, std::max(dp_, 1))),
        lane_(sim_, rec_, setup.truth.decode_at(setup.gpu.total_sms, std::max(dd_, 1)), cfg.decode_launch_us,
              static_cast<double>(dd_) / setup.gpu.device_count, 0) {
    if (dp_ < 1 || dd_ < 1) throw ConfigError("static disaggregation needs devices on both sides");
  }

 private:
  CacheStats cache_stats() const override { return pool_p_.stats(); }
  Tokens max_request_tokens() const override { return std::min(pool_p_.capacity(), pool_d_.capacity()); }

  void on_release(std::size_t i, SimTime now) override {
    queue_.push_back(i);
    start_prefill(now);
  }

  void on_finished(std::size_t i, SimTime now) override {
    pool_d_.erase(req(i).session);
    retry_migrated(now);
  }

  void start_prefill(SimTime now) {
    if (busy_) return;
    std::vector<std::size_t> reqs;
    std::vector<PrefillItem> items;
    Tokens tokens = 0;
    while (!queue_.empty()) {
      const std::size_t i = queue_.front();
      const Request& r = req(i);
      const Tokens cached = pool_p_.cache_peek(r.session);
      const Tokens n_eff = r.n_new + (r.n_reused - std::min(r.n_reused, cached));
      if (!reqs.empty() && tokens + n_eff > cfg_.max_prefill_tokens) break;
      const Tokens need = std::max<Tokens>(0, r.total_len() - cached);
      if (!pool_p_.can_insert(r.session, need)) break;
      const Tokens hit = pool_p_.cache_lookup(r.session, r.n_reused, now);
      pool_p_.pin_all(r.session);
      pool_p_.cache_insert(r.session, need, true, now);
      queue_.pop_front();
      reqs.push_back(i);
      items.push_back({r.n_new + (r.n_reused - hit), hit});
      out(i).hit_tokens = hit;
      out(i).prefill_tokens = items.back().n;
      tokens += items.back().n;
    }
    if (reqs.empty()) return;
    const SimTime begin = now + cfg_.prefill_launch_us;
    const SimTime end = begin + std::max<SimTime>(1, std::llround(prefill_us(PrefillFeatures::of(items), prefill_theta_)));
    busy_ = true;
    running_ = std::move(reqs);
    rec_.busy(Side::Prefill, begin, end, static_cast<double>(dp_) / setup_.gpu.device_count);
    rec_.decision(now, "LaunchPrefill", {{"requests", static_cast<std::int64_t>(running_.size())}, {"tokens", tokens}});
    sim_.schedule(end, EventKind::PrefillLayersDone, EventPayload{.layers = setup_.model.n_layers});
  }

  void handle(const EventRecord& ev) override {
    const SimTime now = ev.time;
    switch (ev.kind) {
      case EventKind::PrefillLayersDone: {
        busy_ = false;
        for (std::size_t i : running_) {
          out(i).prefill_done = now;
          out(i).layers_done = setup_.model.n_layers;
          rec_.token(i, now);
          pool_p_.unpin_all(req(i).session);
          if (req(i).n_out <= 1) {
            finish(i, now);
            continue;
          }
          const SimTime delay = migrate_kv(req(i).total_len(), setup_.model, setup_.gpu);
          link_free_ = std::max(link_free_, now) + delay;
          sim_.schedule(link_free_, EventKind::MigrationDone, EventPayload{.request = static_cast<std::int64_t>(i)});
        }
        running_.clear();
        start_prefill(now);
        break;
      }
      case EventKind::MigrationDone: {
        migrated_.push_back(static_cast<std::size_t>(ev.payload.request));
        retry_migrated(now);
        break;
      }
      case EventKind::DecodeIterationDone: {
        const auto emitted = lane_.on_done(now);
        for (const auto& a : emitted) {
          const auto s = req(a.req).session;
          if (pool_d_.can_insert(s, 1)) pool_d_.cache_insert(s, 1, true, now);
          if (a.emitted >= req(a.req).n_out) {
            lane_.drop(a.req);
            finish(a.req, now);
          }
        }
        lane_.start(now);
        break;
      }
      default:
        break;
    }
  }

  void retry_migrated(SimTime now) {
    while (!migrated_.empty()) {
      const std::size_t i = migrated_.front();
      const auto s = req(i).session;
      const Tokens tokens = req(i).total_len() + 1;
      if (!pool_d_.can_insert(s, tokens)) break;
      pool_d_.cache_insert(s, tokens, true, now);
      migrated_.pop_front();
      lane_.join(i, tokens, now);
    }
  }

  DisaggConfig cfg_;
  int dp_;
  int dd_;
  KvCachePool pool_p_;
  KvCachePool pool_d_;
  PrefillTheta prefill_theta_;
  DecodeLane lane_;
  std::deque<std::size_t> queue_;
  std::vector<std::size_t> running_;
  std::deque<std::size_t> migrated_;
  SimTime link_free_ = 0;
  bool busy_ = false;
};

// ---------------------------------------------------------------------------
// Elastic disaggregation

class ElasticEngine final : public EngineBase {
 public:
  ElasticEngine(const Trace& trace, const ServingSetup& setup, const ElasticConfig& cfg)
      : EngineBase(trace, setup, "elastic"),
        cfg_(cfg),
        dd_(cfg.decode_devices > 0 ? cfg.decode_devices : setup.gpu.device_count / 2),
        free_(setup.gpu.device_count - dd_),
        pool_(setup.gpu.kv_pool_tokens),
        lane_(sim_, rec_, setup.truth.decode_at(setup.gpu.total_sms, std::max(dd_, 1)), cfg.decode_launch_us,
              static_cast<double>(dd_) / setup.gpu.device_count, 0) {
    if (dd_ < 1 || free_ < 1) throw ConfigError("elastic mode needs devices for both phases");
  }

 private:
  CacheStats cache_stats() const override { return pool_.stats(); }
  Tokens max_request_tokens() const override { return pool_.capacity(); }

  void on_release(std::size_t i, SimTime now) override {
    queue_.push_back(i);
    start_prefill(now);
  }

  // KV is released once a request leaves, so later turns recompute it.
  void on_finished(std::size_t i, SimTime now) override {
    pool_.erase(req(i).session);
    start_prefill(now);
  }

  void start_prefill(SimTime now) {
    const int capacity = setup_.gpu.device_count - dd_;
    while (!queue_.empty()) {
      const std::size_t i = queue_.front();
      const Request& r = req(i);
      const int k = elastic_prefill_devices(r.total_len(), cfg_, capacity);
      if (k > free_) return;
      const Tokens need = r.total_len() - std::min(pool_.cache_peek(r.session), r.total_len());
      if (!pool_.can_insert(r.session, need)) return;
      const Tokens hit = pool_.cache_lookup(r.session, r.n_reused, now);
      pool_.pin_all(r.session);
      pool_.cache_insert(r.session, need, true, now);
      queue_.pop_front();
      free_ -= k;
      const PrefillItem item{r.n_new + (r.n_reused - hit), hit};
      out(i).hit_tokens = hit;
      out(i).prefill_tokens = item.n;
      const PrefillTheta theta = setup_.truth.prefill_at(setup_.gpu.total_sms, k);
      const SimTime begin = now + cfg_.prefill_launch_us;
      const SimTime end =
          begin + std::max<SimTime>(1, std::llround(prefill_us(PrefillFeatures::of(std::span(&item, 1)), theta)));
      rec_.busy(Side::Prefill, begin, end, static_cast<double>(k) / setup_.gpu.device_count);
      rec_.decision(now, "LaunchPrefill", {{"request", static_cast<std::int64_t>(i)}, {"devices", k}});
      sim_.schedule(end, EventKind::PrefillLayersDone,
                    EventPayload{.request = static_cast<std::int64_t>(i), .layers = setup_.model.n_layers, .lane = k});
    }
  }

  void handle(const EventRecord& ev) override {
    const SimTime now = ev.time;
    switch (ev.kind) {
      case EventKind::PrefillLayersDone: {
        const auto i = static_cast<std::size_t>(ev.payload.request);
        free_ += static_cast<int>(ev.payload.lane);
        out(i).prefill_done = now;
        out(i).layers_done = setup_.model.n_layers;
        rec_.token(i, now);
        if (req(i).n_out <= 1) {
          finish(i, now);
        } else {
          lane_.join(i, req(i).total_len() + 1, now);
        }
        start_prefill(now);
        break;
      }
      case EventKind::DecodeIterationDone: {
        const auto emitted = lane_.on_done(now);
        for (const auto& a : emitted) {
          const auto s = req(a.req).session;
          if (pool_.can_insert(s, 1)) pool_.cache_insert(s, 1, true, now);
          if (a.emitted >= req(a.req).n_out) {
            lane_.drop(a.req);
            finish(a.req, now);
          }
        }
        lane_.start(now);
        break;
      }
      default:
        break;
    }
  }

  ElasticConfig cfg_;
  int dd_;
  int free_;
  KvCachePool pool_;
  DecodeLane lane_;
  std::deque<std::size_t> queue_;
};

}  // namespace

RunResult run_chunked(const Trace& trace, const ServingSetup& setup, const ChunkedConfig& cfg) {
  ChunkedEngine e(trace, setup, cfg);
  return e.run();
}

Tokens tune_token_budget(const Trace& trace, const ServingSetup& setup, ChunkedConfig cfg,
                         std::span<const Tokens> candidates) {
  ServingSetup quiet = setup;
  quiet.record_events = false;
  Tokens best = 0;
  for (Tokens b : candidates) {
    cfg.token_budget = b;
    const RunResult r = run_chunked(trace, quiet, cfg);
    const auto tbt = tbt_samples(r);
    if (tbt.empty()) continue;
    if (percentile(tbt, setup.slo.percentile) <= static_cast<double>(setup.slo.tbt_slo_us)) best = std::max(best, b);
  }
  return best;
}

RunResult run_static_pd(const Trace& trace, const ServingSetup& setup, const DisaggConfig& cfg) {
  StaticPdEngine e(trace, setup, cfg);
  return e.run();
}

RunResult run_elastic(const Trace& trace, const ServingSetup& setup, const ElasticConfig& cfg) {
  ElasticEngine e(trace, setup, cfg);
  return e.run();
}

}  // namespace muxsim
