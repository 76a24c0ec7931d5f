#include "muxsim/mux_scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <random>

#include "muxsim/errors.hpp"

namespace muxsim {

int layers_to_launch(SimTime t_d, SimTime t_p, int n_layers, int layers_remaining) {
  if (layers_remaining <= 0) return 0;
  if (t_p <= 0 || t_d >= t_p) return std::min(n_layers, layers_remaining);
  // Integer ceiling avoids floating error on exact multiples.
  const __int128 num = static_cast<__int128>(std::max<SimTime>(t_d, 0)) * n_layers;
  const auto n = static_cast<std::int64_t>((num + t_p - 1) / t_p);
  return static_cast<int>(std::clamp<std::int64_t>(n, 1, layers_remaining));
}

WorstCaseEstimate worst_case_on(const DecodeBatchView& batch, std::size_t partition_index,
                                int decode_sms, const LatencyCoeffs& coeffs,
                                const ContentionGuard& guard,
                                std::span<const PrefillDescriptor> corun) {
  const DecodeTheta& theta = coeffs.decode_at(decode_sms);
  WorstCaseEstimate best = worst_case_decode(batch.sum_r, batch.max_r, batch.bs, partition_index, theta,
                                             guard, std::nullopt);
  for (const auto& d : corun) {
    const auto est = worst_case_decode(batch.sum_r, batch.max_r, batch.bs, partition_index, theta, guard, d);
    if (est.worst_us > best.worst_us || est.factor > best.factor) best = est;
  }
  return best;
}

std::optional<std::size_t> try_best_fit_partition(const DecodeBatchView& batch,
                                                  std::span<const PrefillDescriptor> corun,
                                                  SimTime budget_us,
                                                  std::span<const PartitionConfig> configs,
                                                  const LatencyCoeffs& coeffs,
                                                  const ContentionGuard& guard) {
  if (batch.bs < 1) throw EmptyBatch("best_fit_partition on an empty decode batch");
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto est = worst_case_on(batch, i, configs[i].decode_sms, coeffs, guard, corun);
    if (est.worst_us <= budget_us) return i;
  }
  return std::nullopt;
}

std::size_t best_fit_partition(const DecodeBatchView& batch, std::span<const PrefillDescriptor> corun,
                               SimTime budget_us, std::span<const PartitionConfig> configs,
                               const LatencyCoeffs& coeffs, const ContentionGuard& guard) {
  const auto idx = try_best_fit_partition(batch, corun, budget_us, configs, coeffs, guard);
  if (!idx) throw Infeasible("no partition meets a " + std::to_string(budget_us) + "us decode budget");
  return *idx;
}

bool try_preempt(bool active_is_preemptor, bool suspended_exists, SimTime now,
                 SimTime active_deadline, SimTime active_remaining_us, SimTime incoming_us) {
  if (active_is_preemptor || suspended_exists) return false;
  return now + incoming_us + active_remaining_us <= active_deadline;
}

namespace {

class MuxEngine {
 public:
  MuxEngine(const Trace& trace, const ServingSetup& setup, const MuxParams& params)
      : trace_(trace),
        setup_(setup),
        params_(params),
        configs_(partition_configs(setup.gpu)),
        guard_(setup.guard),
        pool_(setup.gpu.kv_pool_tokens),
        rec_(trace, setup.record_events),
        gate_(trace),
        rng_(setup.seed),
        n_layers_(setup.model.n_layers) {
    if (guard_.axes().partitions.size() != configs_.size()) {
      throw ConfigError("guard partitions do not match the GPU partition set");
    }
    idle_target_ = params_.idle_group_target_us > 0 ? params_.idle_group_target_us
                                                    : std::max<SimTime>(1, setup_.slo.tbt_slo_us / 2);
    sim_.set_logging(setup.record_events);
    rec_.result().scheduler = "mux";
    rec_.result().n_layers = n_layers_;
  }

  RunResult run() {
    SimTime last = 0;
    for (std::size_t i = 0; i < trace_.requests.size(); ++i) {
      sim_.schedule(trace_.requests[i].arrival, EventKind::RequestArrival,
                    EventPayload{.request = static_cast<std::int64_t>(i)});
      last = std::max(last, trace_.requests[i].arrival);
    }
    const SimTime horizon = setup_.drain_horizon_us > 0 ? last + setup_.drain_horizon_us : kNever;
    sim_.drain_until(horizon, [this](Simulator&, const EventRecord& ev) { handle(ev); });
    rec_.finalize(trace_, sim_, pool_.stats());
    return std::move(rec_.result());
  }

 private:
  struct Job {
    std::int64_t id = 0;
    std::vector<std::size_t> reqs;
    std::vector<PrefillItem> items;
    int launched = 0;
    int done = 0;
    SimTime deadline = kNever;
    bool preemptor = false;
    PrefillDescriptor desc;
  };
  struct Group {
    std::int64_t job = 0;
    int layers = 0;
    SimTime start = 0;
    SimTime end = 0;
    bool full = false;
    int sms = 0;
    std::uint64_t uid = 0;  // carried as the event generation
  };
  struct Active {
    std::size_t req = 0;
    Tokens ctx = 0;
    Tokens emitted = 0;
  };
  struct PendingMerge {
    std::size_t req = 0;
    SimTime observed = 0;
  };

  const Request& req(std::size_t i) const { return trace_.requests[i]; }
  RequestOutcome& out(std::size_t i) { return rec_.result().requests[i]; }
  const PartitionConfig& cfg() const { return configs_[cur_cfg_]; }
  int total_sms() const { return setup_.gpu.total_sms; }
  SimTime ttft_slo(const Request& r) const { return r.ttft_slo > 0 ? r.ttft_slo : setup_.slo.ttft_slo_us; }

  void handle(const EventRecord& ev) {
    const SimTime now = ev.time;
    switch (ev.kind) {
      case EventKind::RequestArrival: {
        const auto i = static_cast<std::size_t>(ev.payload.request);
        if (gate_.on_arrival(i)) release(i, now);
        break;
      }
      case EventKind::PrefillLayersDone:
        on_layers_done(ev, now);
        break;
      case EventKind::DecodeIterationDone:
        if (ev.payload.generation == decode_gen_) on_decode_done(now);
        break;
      case EventKind::SyncPoll:
        if (!decode_running_ && has_merge_ready(now)) boundary(now);
        break;
      case EventKind::ReconfigDone:
      case EventKind::MigrationDone:
        break;
    }
    note_work(now);
  }

  // -------------------------------------------------------------------------
  // Requests

  void release(std::size_t i, SimTime now) {
    out(i).release = now;
    const Request& r = req(i);
    if (r.total_len() + r.n_out > pool_.capacity()) {
      rec_.decision(now, "Drop", {{"request", static_cast<std::int64_t>(i)}});
      if (auto next = gate_.on_finish(i)) release(*next, now);
      return;
    }
    queue_.push_back(i);
    if (stream_.empty() && may_top_up(now)) launch_prefill(now, false);
  }

  void finish_request(std::size_t i, SimTime now) {
    rec_.finish(i, now);
    pool_.unpin_all(req(i).session);
    if (auto next = gate_.on_finish(i)) release(*next, now);
  }

  // Off-boundary launches must not jump ahead of a decode boundary at the
  // same instant.
  bool may_top_up(SimTime now) const {
    return !in_boundary_ && !(decode_running_ && decode_end_ == now);
  }

  bool has_merge_ready(SimTime now) const {
    return std::any_of(pending_.begin(), pending_.end(), [now](const auto& p) { return p.observed <= now; });
  }

  SimTime observe_time(SimTime t) const {
    const SimTime p = params_.poll_interval_us;
    if (p <= 0) return t;
    return (t + p - 1) / p * p;
  }

  // -------------------------------------------------------------------------
  // Prefill jobs

  std::optional<std::int64_t> form_job(SimTime now, bool single) {
    Job job;
    job.id = next_job_++;
    Tokens tokens = 0;
    while (!queue_.empty()) {
      const std::size_t i = queue_.front();
      const Request& r = req(i);
      const Tokens cached = pool_.cache_peek(r.session);
      const Tokens est_hit = std::min(r.n_reused, cached);
      const Tokens n_eff = r.n_new + (r.n_reused - est_hit);
      if (!job.reqs.empty() && (single || tokens + n_eff > params_.max_prefill_tokens)) break;
      const Tokens need = std::max<Tokens>(0, r.total_len() - cached);
      if (!pool_.can_insert(r.session, need)) {
        if (!stalled_) rec_.decision(now, "Stall", {{"request", static_cast<std::int64_t>(i)}});
        stalled_ = true;
        stalled_during_idle_ = stalled_during_idle_ || stream_.empty();
        break;
      }
      stalled_ = false;
      const Tokens hit = pool_.cache_lookup(r.session, r.n_reused, now);
      pool_.pin_all(r.session);
      pool_.cache_insert(r.session, need, true, now);
      queue_.pop_front();
      job.reqs.push_back(i);
      job.items.push_back({r.n_new + (r.n_reused - hit), hit});
      out(i).hit_tokens = hit;
      out(i).prefill_tokens = job.items.back().n;
      tokens += job.items.back().n;
      job.deadline = std::min(job.deadline, out(i).release + ttft_slo(r));
      job.desc.n += job.items.back().n;
      job.desc.r = std::max(job.desc.r, hit);
    }
    if (job.reqs.empty()) return std::nullopt;
    const std::int64_t id = job.id;
    rec_.decision(now, "FormJob", {{"job", id}, {"requests", static_cast<std::int64_t>(job.reqs.size())},
                                   {"tokens", tokens}});
    jobs_.emplace(id, std::move(job));
    return id;
  }

  int prefill_sms_now() const { return decode_running_ ? cfg().prefill_sms : total_sms(); }

  SimTime predict_job(const Job& j, int sms) const {
    return predict_prefill(j.items, setup_.coeffs.prefill_at(sms));
  }

  SimTime remaining_pred(const Job& j, int sms) const {
    return predict_job(j, sms) * (n_layers_ - j.launched) / n_layers_;
  }

  // Makes sure there is an active job with unlaunched layers if any work is
  // available. Tests preemption against the FCFS head first.
  void select_job(SimTime now) {
    if (active_) {
      Job& a = jobs_.at(*active_);
      if (a.launched >= n_layers_) active_.reset();
    }
    if (active_ && params_.preemption && params_.layerwise && !queue_.empty()) {
      Job& a = jobs_.at(*active_);
      const std::size_t head = queue_.front();
      const Request& h = req(head);
      const Tokens cached = pool_.cache_peek(h.session);
      const Tokens hit = std::min(h.n_reused, cached);
      const PrefillItem item{h.n_new + (h.n_reused - hit), hit};
      const int sms = prefill_sms_now();
      const SimTime head_pred = predict_prefill(std::span<const PrefillItem>(&item, 1),
                                                setup_.coeffs.prefill_at(sms));
      const SimTime a_rem = remaining_pred(a, sms);
      const SimTime head_deadline = out(head).release + ttft_slo(h);
      const bool would_miss = now + a_rem + head_pred > head_deadline;
      if (would_miss && try_preempt(a.preemptor, suspended_.has_value(), now, a.deadline, a_rem, head_pred)) {
        if (auto id = form_job(now, true)) {
          if (a.preemptor) rec_.result().preemptor_preempted = true;
          suspended_ = active_;
          active_ = id;
          Job& inc = jobs_.at(*id);
          inc.preemptor = true;
          for (std::size_t r : a.reqs) out(r).preempted = true;
          ++rec_.result().preemptions;
          rec_.result().max_suspended = std::max<std::size_t>(rec_.result().max_suspended, 1);
          rec_.decision(now, "Preempt", {{"incoming", *id}, {"victim", a.id}});
          return;
        }
      }
    }
    if (active_) return;
    if (suspended_) {
      active_ = suspended_;
      suspended_.reset();
      rec_.decision(now, "Resume", {{"job", *active_}});
      return;
    }
    active_ = form_job(now, false);
  }

  void push_group(Job& job, int layers, SimTime launch_done, SimTime now) {
    const bool full = !decode_running_;
    const int sms = full ? total_sms() : cfg().prefill_sms;
    const SimTime start = std::max(launch_done, stream_tail_);
    double true_us = prefill_us(PrefillFeatures::of(job.items), setup_.truth.prefill_at(sms)) * layers / n_layers_;
    if (!full) {
      std::uniform_real_distribution<double> slow(1.0, setup_.truth.prefill_slowdown_max);
      true_us *= slow(rng_);
    }
    const SimTime end = start + std::max<SimTime>(1, std::llround(true_us));
    if (stream_.empty()) close_idle(start);
    stream_.push_back({job.id, layers, start, end, full, sms, ++next_group_uid_});
    stream_tail_ = end;
    if (full) full_until_ = std::max(full_until_, end);
    job.launched += layers;
    rec_.busy(Side::Prefill, start, end, static_cast<double>(sms) / total_sms());
    rec_.decision(now, "LaunchPrefill", {{"job", job.id}, {"layers", layers}, {"sms", sms}});
    sim_.schedule(end, EventKind::PrefillLayersDone,
                  EventPayload{.batch = job.id, .partition = sms, .layers = layers, .generation = next_group_uid_});
  }

  // Launches layer groups until the stream holds max_outstanding_groups.
  void launch_prefill(SimTime now, bool at_boundary) {
    if (!params_.layerwise && decode_running_ && !at_boundary) return;
    while (static_cast<int>(stream_.size()) < params_.max_outstanding_groups) {
      select_job(now);
      if (!active_) return;
      Job& job = jobs_.at(*active_);
      const int remaining = n_layers_ - job.launched;
      int n = remaining;
      SimTime cost = params_.full_launch_us;
      if (params_.layerwise) {
        const int sms = prefill_sms_now();
        const SimTime t_d = decode_running_ ? cur_pred_decode_ : idle_target_;
        n = layers_to_launch(t_d, predict_job(job, sms), n_layers_, remaining);
        cost = params_.group_launch_base_us +
               static_cast<SimTime>(std::llround(params_.group_launch_per_layer_us * n));
      }
      const SimTime done = host_.launch(now, cost);
      push_group(job, n, done, now);
      if (!params_.layerwise) return;
    }
  }

  void on_layers_done(const EventRecord& ev, SimTime now) {
    const bool live = std::any_of(stream_.begin(), stream_.end(),
                                  [&](const Group& g) { return g.uid == ev.payload.generation; });
    if (!live) return;  // superseded by a re-issued completion
    if (stream_.front().uid != ev.payload.generation) throw Error("prefill stream out of order");
    const Group g = stream_.front();
    stream_.pop_front();
    Job& job = jobs_.at(g.job);
    job.done += g.layers;
    for (std::size_t r : job.reqs) out(r).layers_done += g.layers;
    if (stream_.empty()) {
      idle_start_ = now;
      work_since_ = -1;
      stalled_during_idle_ = false;
    }
    if (job.done == n_layers_) complete_job(job.id, now);
    if (static_cast<int>(stream_.size()) < params_.max_outstanding_groups && may_top_up(now)) {
      launch_prefill(now, false);
    }
  }

  void complete_job(std::int64_t id, SimTime now) {
    Job job = std::move(jobs_.at(id));
    jobs_.erase(id);
    if (active_ == id) active_.reset();
    rec_.decision(now, "PrefillDone", {{"job", id}});
    const SimTime observed = observe_time(now);
    for (std::size_t i : job.reqs) {
      out(i).prefill_done = now;
      rec_.token(i, now);
      append_token(i, now);
      if (req(i).n_out <= 1) {
        finish_request(i, now);
      } else {
        pending_.push_back({i, observed});
      }
    }
    // The running iteration may end before the poll observes this job.
    if (observed > now && !pending_.empty()) {
      sim_.schedule(observed, EventKind::SyncPoll);
    } else if (!decode_running_ && has_merge_ready(now)) {
      boundary(now);
    }
  }

  void append_token(std::size_t i, SimTime now) {
    const auto session = req(i).session;
    if (pool_.can_insert(session, 1)) pool_.cache_insert(session, 1, true, now);
  }

  // -------------------------------------------------------------------------
  // Decode

  void on_decode_done(SimTime now) {
    decode_running_ = false;
    in_boundary_ = true;
    std::vector<Active> kept;
    kept.reserve(batch_.size());
    for (auto& a : batch_) {
      ++a.emitted;
      ++a.ctx;
      rec_.token(a.req, now);
      append_token(a.req, now);
      if (a.emitted >= req(a.req).n_out) {
        finish_request(a.req, now);
      } else {
        kept.push_back(a);
      }
    }
    batch_ = std::move(kept);
    in_boundary_ = false;
    boundary(now);
  }

  std::vector<PrefillDescriptor> corun_descriptors() const {
    std::vector<PrefillDescriptor> out;
    std::vector<std::int64_t> ids;
    for (const auto& g : stream_) ids.push_back(g.job);
    if (active_ && jobs_.at(*active_).launched < n_layers_) ids.push_back(*active_);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (auto id : ids) out.push_back(jobs_.at(id).desc);
    return out;
  }

  void boundary(SimTime now) {
    if (decode_running_ || in_boundary_) return;
    for (auto it = pending_.begin(); it != pending_.end();) {
      if (it->observed <= now) {
        const Request& r = req(it->req);
        batch_.push_back({it->req, r.total_len() + 1, 1});
        out(it->req).merged = now;
        rec_.decision(now, "Merge", {{"request", static_cast<std::int64_t>(it->req)}});
        it = pending_.erase(it);
      } else {
        ++it;
      }
    }
    if (batch_.empty()) {
      rec_.decision(now, "DecodeIdle");
      cur_pred_decode_ = 0;
      launch_prefill(now, true);
      return;
    }
    // From here on a decode iteration will run beside any prefill launched.
    decode_running_ = true;

    if (!params_.layerwise) launch_prefill(now, true);
    else select_job(now);

    DecodeBatchView view;
    view.bs = static_cast<std::int64_t>(batch_.size());
    for (const auto& a : batch_) {
      view.sum_r += static_cast<double>(a.ctx);
      view.max_r = std::max(view.max_r, a.ctx);
    }
    const auto corun = corun_descriptors();
    const SimTime budget = setup_.slo.tbt_slo_us - params_.decode_launch_us - setup_.gpu.reconfig_cost_us;
    const auto fit = try_best_fit_partition(view, corun, budget, configs_, setup_.coeffs, guard_);
    const std::size_t idx = fit ? *fit : configs_.size() - 1;
    if (!fit) {
      ++rec_.result().infeasible_iterations;
      rec_.decision(now, "Saturated", {{"bs", view.bs}});
    }
    if (idx != cur_cfg_) {
      const SimTime cost = reconfigure(configs_[cur_cfg_], configs_[idx], setup_.gpu);
      cur_cfg_ = idx;
      rec_.decision(now, "Partition", {{"decode_sms", cfg().decode_sms}, {"prefill_sms", cfg().prefill_sms}});
      if (cost > 0) host_.launch(now, cost);
      sim_.schedule(now + cost, EventKind::ReconfigDone, EventPayload{.partition = cfg().decode_sms});
    }

    const int dsms = cfg().decode_sms;
    const WorstCaseEstimate est = worst_case_on(view, idx, dsms, setup_.coeffs, guard_, corun);
    const SimTime launch_done = host_.launch(now, params_.decode_launch_us);
    const SimTime start = std::max(launch_done, full_until_);

    const double truth_solo = decode_us(view.sum_r, view.bs, setup_.truth.decode_at(dsms));
    const SimTime truth_solo_us = std::llround(truth_solo);
    double cell_max = 1.0;
    std::optional<GuardCell> hottest;
    double hottest_factor = 0;
    const Tokens key = guard_.decode_key() == DecodeKey::MaxReused ? view.max_r : static_cast<Tokens>(view.sum_r);
    for (const auto& d : corun) {
      const GuardCell c = guard_.cell(d.n, d.r, key, view.bs, idx);
      cell_max = std::max(cell_max, setup_.truth.cell_max(guard_.axes(), c));
      if (guard_.max_slowdown(c) > hottest_factor) {
        hottest_factor = guard_.max_slowdown(c);
        hottest = c;
      }
    }
    double factor = 1.0;
    if (!corun.empty()) {
      std::uniform_real_distribution<double> slow(1.0, cell_max);
      factor = slow(rng_);
    }
    const SimTime dur = std::max<SimTime>(1, inflate(truth_solo_us, factor));
    if (hottest && est.solo_us > 0) guard_.refine(*hottest, static_cast<double>(dur) / est.solo_us);

    decode_end_ = start + dur;
    cur_pred_decode_ = est.solo_us;
    ++decode_gen_;
    rec_.decision(now, "LaunchDecode", {{"bs", view.bs}, {"decode_sms", dsms}, {"worst_us", est.worst_us}});
    rec_.busy(Side::Decode, start, decode_end_, static_cast<double>(dsms) / total_sms());
    IterationRecord it;
    it.start = start;
    it.end = decode_end_;
    it.bs = view.bs;
    it.decode_sms = dsms;
    it.predicted_us = est.solo_us;
    it.worst_us = est.worst_us;
    it.feasible = fit.has_value();
    it.corun = !corun.empty();
    it.true_factor = factor;
    it.guard_factor = est.factor;
    it.truth_cell_max = cell_max;
    rec_.result().iterations.push_back(it);
    sim_.schedule(decode_end_, EventKind::DecodeIterationDone, EventPayload{.generation = decode_gen_});
    // Decode first: a group finishing at the same instant was queued earlier,
    // so its completion is re-issued behind the decode event.
    for (auto& g : stream_) {
      if (g.end != decode_end_) continue;
      g.uid = ++next_group_uid_;
      sim_.schedule(g.end, EventKind::PrefillLayersDone,
                    EventPayload{.batch = g.job, .partition = g.sms, .layers = g.layers, .generation = g.uid});
    }

    if (params_.layerwise) launch_prefill(now, true);
  }

  // -------------------------------------------------------------------------
  // Idle accounting for the prefill side

  bool has_prefill_work() const {
    if (!queue_.empty() || suspended_) return true;
    return active_ && jobs_.at(*active_).launched < n_layers_;
  }

  void note_work(SimTime now) {
    if (stream_.empty() && work_since_ < 0 && has_prefill_work()) work_since_ = now;
  }

  void close_idle(SimTime start) {
    if (start > idle_start_) {
      rec_.result().idle.push_back({idle_start_, start, work_since_, stalled_during_idle_});
    }
    work_since_ = -1;
    stalled_during_idle_ = false;
  }

  const Trace& trace_;
  const ServingSetup& setup_;
  MuxParams params_;
  std::vector<PartitionConfig> configs_;
  ContentionGuard guard_;
  KvCachePool pool_;
  Recorder rec_;
  SessionGate gate_;
  Simulator sim_;
  HostTimeline host_;
  std::mt19937_64 rng_;
  int n_layers_;
  SimTime idle_target_ = 0;

  std::size_t cur_cfg_ = 0;
  std::deque<std::size_t> queue_;
  std::map<std::int64_t, Job> jobs_;
  std::int64_t next_job_ = 0;
  std::optional<std::int64_t> active_;
  std::optional<std::int64_t> suspended_;
  std::deque<Group> stream_;
  SimTime stream_tail_ = 0;
  SimTime full_until_ = 0;
  std::vector<PendingMerge> pending_;
  std::vector<Active> batch_;
  bool decode_running_ = false;
  SimTime decode_end_ = -1;
  std::uint64_t decode_gen_ = 0;
  std::uint64_t next_group_uid_ = 0;
  SimTime cur_pred_decode_ = 0;
  bool stalled_ = false;
  bool in_boundary_ = false;

  SimTime idle_start_ = 0;
  SimTime work_since_ = -1;
  bool stalled_during_idle_ = false;
};

}  // namespace

RunResult run_mux(const Trace& trace, const ServingSetup& setup, const MuxParams& params) {
  MuxEngine engine(trace, setup, params);
  return engine.run();
}

}  // namespace muxsim
