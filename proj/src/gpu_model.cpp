#include "muxsim/gpu_model.hpp"

#include <algorithm>
#include <cmath>

#include "muxsim/errors.hpp"

namespace muxsim {

GpuSpec GpuSpec::a100() { return GpuSpec{}; }

GpuSpec GpuSpec::h100() {
  GpuSpec s;
  s.name = "h100";
  s.total_sms = 132;
  return s;
}

std::vector<PartitionConfig> partition_configs(const GpuSpec& spec) {
  if (spec.granularity <= 0) throw ConfigError("granularity must be positive");
  std::vector<PartitionConfig> out;
  for (int d = spec.granularity; spec.total_sms - d >= spec.min_side; d += spec.granularity) {
    out.push_back({d, spec.total_sms - d});
  }
  if (out.empty()) {
    throw NoConfig("no partition fits " + std::to_string(spec.total_sms) + " SMs with min_side " +
                   std::to_string(spec.min_side));
  }
  return out;
}

std::vector<int> decode_partitions(const GpuSpec& spec) {
  std::vector<int> out;
  for (const auto& c : partition_configs(spec)) out.push_back(c.decode_sms);
  return out;
}

SimTime reconfigure(const PartitionConfig& current, const PartitionConfig& target, const GpuSpec& spec) {
  return current == target ? 0 : spec.reconfig_cost_us;
}

SimTime migrate_kv(Tokens tokens, const ModelSpec& model, const GpuSpec& spec) {
  if (tokens <= 0) return 0;
  const double us = static_cast<double>(tokens) * model.kv_bytes_per_token / spec.link_bandwidth_bytes_per_us;
  return static_cast<SimTime>(std::ceil(us - 1e-9));
}

KvCachePool::KvCachePool(Tokens capacity_tokens) : capacity_(capacity_tokens) {
  if (capacity_ < 0) throw ConfigError("pool capacity must be non-negative");
}

void KvCachePool::touch(std::int64_t session, Entry& e, SimTime now) {
  if (e.stamp != 0) lru_.erase({e.stamp, session});
  e.stamp = ++clock_;
  e.last_use = now;
  lru_.insert({e.stamp, session});
}

Tokens KvCachePool::cache_lookup(std::int64_t session, Tokens requested_reused, SimTime now) {
  if (requested_reused < 0) throw ConfigError("negative reuse request");
  Tokens hit = 0;
  auto it = entries_.find(session);
  if (it != entries_.end()) {
    hit = std::min(requested_reused, it->second.cached);
    touch(session, it->second, now);
  }
  if (requested_reused > 0) {
    stats_.hit_tokens += hit;
    stats_.requested_reused_tokens += requested_reused;
  }
  return hit;
}

Tokens KvCachePool::cache_peek(std::int64_t session) const {
  auto it = entries_.find(session);
  return it == entries_.end() ? 0 : it->second.cached;
}

Tokens KvCachePool::cache_insert(std::int64_t session, Tokens tokens, bool pinned, SimTime now) {
  if (tokens < 0) throw ConfigError("negative insert");
  if (tokens > capacity_) throw PoolExhausted("insert larger than pool capacity");
  if (!can_insert(session, tokens)) throw PoolExhausted("pool exhausted: pinned tokens block eviction");

  Tokens evicted = 0;
  while (used_ + tokens > capacity_) {
    for (auto lit = lru_.begin(); lit != lru_.end(); ++lit) {
      const std::int64_t victim = lit->second;
      if (victim == session) continue;
      Entry& e = entries_.at(victim);
      const Tokens free = e.cached - e.pinned;
      if (free <= 0) continue;
      const Tokens block = std::min(kBlockTokens, free);
      e.cached -= block;
      used_ -= block;
      evicted += block;
      if (e.cached == 0) {
        lru_.erase(lit);
        entries_.erase(victim);
      }
      break;
    }
  }

  Entry& e = entries_[session];
  e.cached += tokens;
  if (pinned) {
    e.pinned += tokens;
    pinned_ += tokens;
  }
  used_ += tokens;
  touch(session, e, now);
  return evicted;
}

bool KvCachePool::can_insert(std::int64_t session, Tokens tokens) const {
  if (tokens > capacity_) return false;
  const Tokens need = used_ + tokens - capacity_;
  if (need <= 0) return true;
  Tokens evictable = used_ - pinned_;
  if (auto own = entries_.find(session); own != entries_.end()) {
    evictable -= own->second.cached - own->second.pinned;
  }
  return evictable >= need;
}

void KvCachePool::pin_all(std::int64_t session) {
  auto it = entries_.find(session);
  if (it == entries_.end()) return;
  pinned_ += it->second.cached - it->second.pinned;
  it->second.pinned = it->second.cached;
}

void KvCachePool::unpin_all(std::int64_t session) {
  auto it = entries_.find(session);
  if (it == entries_.end()) return;
  pinned_ -= it->second.pinned;
  it->second.pinned = 0;
}

void KvCachePool::erase(std::int64_t session) {
  auto it = entries_.find(session);
  if (it == entries_.end()) return;
  used_ -= it->second.cached;
  pinned_ -= it->second.pinned;
  lru_.erase({it->second.stamp, session});
  entries_.erase(it);
}

std::vector<PoolEntrySnapshot> KvCachePool::snapshot() const {
  std::vector<PoolEntrySnapshot> out;
  for (const auto& [s, e] : entries_) out.push_back({s, e.cached, e.pinned, e.last_use});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.session < b.session; });
  return out;
}

std::vector<std::int64_t> KvCachePool::lru_order() const {
  std::vector<std::int64_t> out;
  for (const auto& [stamp, s] : lru_) out.push_back(s);
  return out;
}

}  // namespace muxsim
