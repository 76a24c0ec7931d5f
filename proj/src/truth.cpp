#include "muxsim/truth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "muxsim/errors.hpp"

namespace muxsim {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <std::size_t K>
std::array<double, K> scaled(const std::array<double, K>& full, const std::array<double, K>& sm_exp,
                             const std::array<double, K>& dev_exp, double sm_ratio, double dev_ratio) {
  std::array<double, K> out{};
  for (std::size_t i = 0; i < K; ++i) {
    out[i] = full[i] * std::pow(dev_ratio, dev_exp[i]) * std::pow(sm_ratio, sm_exp[i]);
  }
  return out;
}

Tokens log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return static_cast<Tokens>(std::llround(std::exp(u(rng))));
}

}  // namespace

PrefillTheta TruthModel::prefill_at(int sms, int devices) const {
  if (sms <= 0 || devices <= 0) throw ConfigError("prefill_at needs positive sms and devices");
  return PrefillTheta{scaled(prefill_full.t, prefill_sm_exp, prefill_device_exp,
                             static_cast<double>(total_sms) / sms,
                             static_cast<double>(device_count) / devices)};
}

DecodeTheta TruthModel::decode_at(int sms, int devices) const {
  if (sms <= 0 || devices <= 0) throw ConfigError("decode_at needs positive sms and devices");
  return DecodeTheta{scaled(decode_full.t, decode_sm_exp, decode_device_exp,
                            static_cast<double>(total_sms) / sms,
                            static_cast<double>(device_count) / devices)};
}

double TruthModel::cell_max(const GuardAxes& axes, const GuardCell& cell) const {
  std::uint64_t idx = cell.prefill_n;
  idx = idx * axes.prefill_r.size() + cell.prefill_r;
  idx = idx * axes.decode_r.size() + cell.decode_r;
  idx = idx * axes.batch_sizes.size() + cell.bs;
  idx = idx * axes.partitions.size() + cell.partition;
  const std::uint64_t h = splitmix64(contention_seed ^ splitmix64(idx));
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return 1.0 + u * (contention_max - 1.0);
}

LatencyCoeffs TruthModel::exact_coeffs(const std::vector<int>& partitions) const {
  LatencyCoeffs c;
  for (int sms : profiled_sms(partitions, total_sms)) {
    c.prefill[sms] = prefill_at(sms);
    c.decode[sms] = decode_at(sms);
  }
  return c;
}

ContentionGuard TruthModel::exact_guard(const GuardAxes& axes, double cap) const {
  ContentionGuard g(axes, cap, true);
  for (std::size_t i = 0; i < axes.cell_count(); ++i) {
    const GuardCell c = g.unflat(i);
    g.set(c, cell_max(axes, c));
  }
  return g;
}

std::vector<int> profiled_sms(const std::vector<int>& decode_partitions, int total_sms) {
  std::set<int> s{total_sms};
  for (int p : decode_partitions) {
    s.insert(p);
    s.insert(total_sms - p);
  }
  return {s.begin(), s.end()};
}

std::vector<ProfileSample> synth_solo_profiles(const TruthModel& truth, Phase phase,
                                               const std::vector<int>& sms_list,
                                               std::size_t per_sms, double noise,
                                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-noise, noise);
  std::uniform_int_distribution<int> batch_items(1, 4);
  std::bernoulli_distribution no_reuse(0.3);
  std::vector<ProfileSample> out;
  for (int sms : sms_list) {
    for (std::size_t i = 0; i < per_sms; ++i) {
      ProfileSample s;
      s.phase = phase;
      s.sms = sms;
      double solo = 0;
      if (phase == Phase::Prefill) {
        const int items = batch_items(rng);
        for (int k = 0; k < items; ++k) {
          PrefillItem it;
          it.n = log_uniform(rng, 16, 32768);
          it.r = no_reuse(rng) ? 0 : log_uniform(rng, 16, 98304);
          s.prefill.push_back(it);
        }
        solo = prefill_us(PrefillFeatures::of(s.prefill), truth.prefill_at(sms));
      } else {
        const Tokens bs = log_uniform(rng, 1, 256);
        double sum = 0;
        for (Tokens k = 0; k < bs; ++k) {
          s.decode_r.push_back(log_uniform(rng, 16, 32768));
          sum += static_cast<double>(s.decode_r.back());
        }
        solo = decode_us(sum, bs, truth.decode_at(sms));
      }
      s.latency_us = solo * (1.0 + jitter(rng));
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<ProfileSample> synth_corun_profiles(const TruthModel& truth, const GuardAxes& axes,
                                                const std::vector<ProfilePoint>& plan, int draws,
                                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ContentionGuard shape(axes);
  std::vector<ProfileSample> out;
  out.reserve(plan.size() * static_cast<std::size_t>(std::max(draws, 0)));
  for (const auto& p : plan) {
    const auto part = std::find(axes.partitions.begin(), axes.partitions.end(), p.partition);
    if (part == axes.partitions.end()) throw ConfigError("plan partition not on the guard axes");
    const GuardCell cell = shape.cell(p.prefill_n, p.prefill_r, p.decode_r, p.bs,
                                      static_cast<std::size_t>(part - axes.partitions.begin()));
    const double hi = truth.cell_max(axes, cell);
    std::uniform_real_distribution<double> slow(1.0, hi);
    const double solo = decode_us(static_cast<double>(p.decode_r * p.bs), p.bs, truth.decode_at(p.partition));
    for (int d = 0; d < draws; ++d) {
      ProfileSample s;
      s.phase = Phase::Decode;
      s.sms = p.partition;
      s.decode_r.assign(static_cast<std::size_t>(p.bs), p.decode_r);
      s.latency_us = solo * slow(rng);
      s.peer = CoRunPeer{p.prefill_n, p.prefill_r, p.decode_r, p.bs};
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace muxsim
