#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "muxsim/cost_model.hpp"
#include "muxsim/sim_core.hpp"
#include "muxsim/workload.hpp"

namespace muxsim {

struct GpuSpec {
  std::string name = "a100";
  int total_sms = 108;
  int granularity = 16;
  int min_side = 12;
  SimTime reconfig_cost_us = 100;
  int device_count = 8;
  Tokens kv_pool_tokens = 2'000'000;
  double link_bandwidth_bytes_per_us = 600e3;  // 600 GB/s

  static GpuSpec a100();
  static GpuSpec h100();
};

struct PartitionConfig {
  int decode_sms = 0;
  int prefill_sms = 0;
  bool operator==(const PartitionConfig&) const = default;
};

// Decode side k*granularity for k >= 1 with at least min_side SMs left for
// prefill, ascending. Throws NoConfig when not even k = 1 fits.
std::vector<PartitionConfig> partition_configs(const GpuSpec& spec);
std::vector<int> decode_partitions(const GpuSpec& spec);

SimTime reconfigure(const PartitionConfig& current, const PartitionConfig& target, const GpuSpec& spec);

// tokens * kv_bytes_per_token / bandwidth, rounded up.
SimTime migrate_kv(Tokens tokens, const ModelSpec& model, const GpuSpec& spec);

struct CacheStats {
  Tokens hit_tokens = 0;
  Tokens requested_reused_tokens = 0;
  double hit_rate() const {
    return requested_reused_tokens > 0
               ? static_cast<double>(hit_tokens) / static_cast<double>(requested_reused_tokens)
               : 0.0;
  }
  CacheStats& operator+=(const CacheStats& o) {
    hit_tokens += o.hit_tokens;
    requested_reused_tokens += o.requested_reused_tokens;
    return *this;
  }
};

struct PoolEntrySnapshot {
  std::int64_t session = 0;
  Tokens cached = 0;
  Tokens pinned = 0;
  SimTime last_use = 0;
};

// Token-capacity KV pool with per-session entries. Eviction removes 64-token
// blocks from the tail of the least recently used session; pinned tokens are
// never evicted.
class KvCachePool {
 public:
  static constexpr Tokens kBlockTokens = 64;

  explicit KvCachePool(Tokens capacity_tokens);

  Tokens capacity() const { return capacity_; }
  Tokens used() const { return used_; }
  Tokens pinned() const { return pinned_; }
  const CacheStats& stats() const { return stats_; }

  Tokens cache_lookup(std::int64_t session, Tokens requested_reused, SimTime now);
  // Cached tokens without touching LRU order or stats.
  Tokens cache_peek(std::int64_t session) const;
  // Extends the session's entry by `tokens`, evicting other sessions' unpinned
  // tokens as needed. Returns the number of evicted tokens. Throws
  // PoolExhausted (leaving the pool unchanged) if not enough unpinned space.
  Tokens cache_insert(std::int64_t session, Tokens tokens, bool pinned, SimTime now);
  bool can_insert(std::int64_t session, Tokens tokens) const;
  void pin_all(std::int64_t session);
  void unpin_all(std::int64_t session);
  void erase(std::int64_t session);

  std::vector<PoolEntrySnapshot> snapshot() const;
  // Sessions in eviction order (least recent first), for tests.
  std::vector<std::int64_t> lru_order() const;

 private:
  struct Entry {
    Tokens cached = 0;
    Tokens pinned = 0;
    SimTime last_use = 0;
    std::uint64_t stamp = 0;
  };
  void touch(std::int64_t session, Entry& e, SimTime now);

  Tokens capacity_;
  Tokens used_ = 0;
  Tokens pinned_ = 0;
  std::uint64_t clock_ = 0;
  std::unordered_map<std::int64_t, Entry> entries_;
  std::set<std::pair<std::uint64_t, std::int64_t>> lru_;
  CacheStats stats_;
};

}  // namespace muxsim
