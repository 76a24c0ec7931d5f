#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "muxsim/cost_model.hpp"
#include "muxsim/errors.hpp"
#include "muxsim/gpu_model.hpp"
#include "muxsim/truth.hpp"

using namespace muxsim;

namespace {

// Millisecond coefficients rescaled to the microsecond convention.
PrefillTheta prefill_ms(double t1, double t2, double t3, double t4) {
  return {{t1 * 1000, t2 * 1000, t3 * 1000, t4 * 1000}};
}
DecodeTheta decode_ms(double t1, double t2, double t3) { return {{t1 * 1000, t2 * 1000, t3 * 1000}}; }

GuardAxes a100_axes() { return default_guard_axes(decode_partitions(GpuSpec::a100())); }

}  // namespace

TEST_CASE("prefill polynomial evaluation") {
  const PrefillTheta th = prefill_ms(1e-6, 5e-7, 1e-4, 5.0);
  const PrefillItem one{1000, 2000};
  CHECK(predict_prefill(std::span(&one, 1), th) == 7100);
  const std::vector<PrefillItem> two{{100, 0}, {100, 0}};
  CHECK(predict_prefill(two, th) == 5040);
  CHECK(predict_prefill(two, PrefillTheta{}) == 0);
  CHECK_THROWS_AS(predict_prefill(std::span<const PrefillItem>{}, th), EmptyBatch);
}

TEST_CASE("decode polynomial evaluation") {
  const DecodeTheta th = decode_ms(1e-5, 0.1, 2.0);
  const std::vector<Tokens> batch(32, 1000);
  CHECK(predict_decode(batch, th) == 5520);
  const Tokens zero = 0;
  CHECK(predict_decode(std::span(&zero, 1), th) == 2100);
  CHECK(predict_decode(batch, DecodeTheta{{0, 0, 777}}) == 777);
  CHECK_THROWS_AS(predict_decode(std::span<const Tokens>{}, th), EmptyBatch);
}

TEST_CASE("predictors are monotone for nonnegative coefficients") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<Tokens> tok(1, 20000);
  for (int trial = 0; trial < 500; ++trial) {
    const PrefillTheta pt{{u(rng) * 1e-3, u(rng) * 1e-3, u(rng), u(rng) * 1e4}};
    const DecodeTheta dt{{u(rng) * 0.1, u(rng) * 50, u(rng) * 1e4}};
    std::vector<PrefillItem> batch{{tok(rng), tok(rng) - 1}, {tok(rng), tok(rng) - 1}};
    const SimTime base = predict_prefill(batch, pt);
    auto more_n = batch;
    more_n[1].n += tok(rng);
    auto more_r = batch;
    more_r[0].r += tok(rng);
    CHECK(predict_prefill(more_n, pt) >= base);
    CHECK(predict_prefill(more_r, pt) >= base);

    std::vector<Tokens> dec{tok(rng), tok(rng), tok(rng)};
    const SimTime dbase = predict_decode(dec, dt);
    auto longer = dec;
    longer[2] += tok(rng);
    auto bigger = dec;
    bigger.push_back(0);
    CHECK(predict_decode(longer, dt) >= dbase);
    CHECK(predict_decode(bigger, dt) >= dbase);
  }
}

TEST_CASE("nnls matches the unconstrained solution when it is feasible") {
  // A x = b with x = (1, 2).
  const std::vector<double> a{1, 0, 0, 1, 1, 1};
  const std::vector<double> b{1, 2, 3};
  const auto x = nnls(a, 3, 2, b);
  CHECK(x[0] == doctest::Approx(1.0));
  CHECK(x[1] == doctest::Approx(2.0));
}

TEST_CASE("nnls clamps a negative component") {
  // Unconstrained optimum is (2, -1); constrained optimum puts x1 = 0.
  const std::vector<double> a{1, 1, 1, 2};
  const std::vector<double> b{1, 0};
  const auto x = nnls(a, 2, 2, b);
  CHECK(x[1] == doctest::Approx(0.0));
  // argmin over x0 >= 0 of (x0 - 1)^2 + x0^2 is 0.5.
  CHECK(x[0] == doctest::Approx(0.5));
}

TEST_CASE("fit recovers noiseless coefficients exactly") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.2, 5.0);
  std::uniform_real_distribution<double> logn(std::log(16.0), std::log(32768.0));
  const int sms = 92;
  for (int trial = 0; trial < 100; ++trial) {
    const PrefillTheta pt{{u(rng) * 1e-4, u(rng) * 1e-4, u(rng) * 10, u(rng) * 1e4}};
    const DecodeTheta dt{{u(rng) * 1e-2, u(rng) * 10, u(rng) * 1e3}};
    std::vector<ProfileSample> samples;
    for (int i = 0; i < 60; ++i) {
      ProfileSample p;
      p.phase = Phase::Prefill;
      p.sms = sms;
      const int items = 1 + i % 3;
      for (int k = 0; k < items; ++k) {
        p.prefill.push_back({static_cast<Tokens>(std::exp(logn(rng))), (i % 4 == 0) ? 0 : static_cast<Tokens>(std::exp(logn(rng)))});
      }
      p.latency_us = prefill_us(PrefillFeatures::of(p.prefill), pt);
      samples.push_back(p);

      ProfileSample d;
      d.phase = Phase::Decode;
      d.sms = sms;
      const int bs = 1 + static_cast<int>(rng() % 128);
      for (int k = 0; k < bs; ++k) d.decode_r.push_back(static_cast<Tokens>(std::exp(logn(rng))));
      double sum = 0;
      for (Tokens r : d.decode_r) sum += static_cast<double>(r);
      d.latency_us = decode_us(sum, bs, dt);
      samples.push_back(d);
    }
    const FitResult fp = fit(samples, Phase::Prefill, sms);
    const FitResult fd = fit(samples, Phase::Decode, sms);
    for (std::size_t j = 0; j < 4; ++j) REQUIRE(fp.theta[j] == doctest::Approx(pt.t[j]).epsilon(1e-6));
    for (std::size_t j = 0; j < 3; ++j) REQUIRE(fd.theta[j] == doctest::Approx(dt.t[j]).epsilon(1e-6));
    CHECK(fp.holdout_count == 12);
    CHECK(fp.max_holdout_deviation < 1e-6);
  }
}

TEST_CASE("fit rejects too few or degenerate samples") {
  std::vector<ProfileSample> two(2);
  for (auto& s : two) {
    s.phase = Phase::Prefill;
    s.sms = 108;
    s.prefill = {{100, 0}};
    s.latency_us = 10;
  }
  CHECK_THROWS_AS(fit(two, Phase::Prefill, 108), Degenerate);
  // Identical feature vectors: rank one.
  std::vector<ProfileSample> same(12, two[0]);
  same[0].prefill = {{100, 10}};
  CHECK_THROWS_AS(fit(same, Phase::Prefill, 108), Degenerate);
}

TEST_CASE("fit on noisy synthetic profiles stays within the accuracy bounds") {
  TruthModel truth;
  const auto parts = decode_partitions(GpuSpec::a100());
  const auto sms = profiled_sms(parts, 108);
  const auto pre = synth_solo_profiles(truth, Phase::Prefill, sms, 200, 0.01, 5);
  const auto dec = synth_solo_profiles(truth, Phase::Decode, sms, 200, 0.01, 6);
  for (int s : sms) {
    CHECK(fit(pre, Phase::Prefill, s).max_holdout_deviation <= 0.0816);
    CHECK(fit(dec, Phase::Decode, s).max_holdout_deviation <= 0.0884);
  }
}

TEST_CASE("guard binning by ceiling") {
  const ContentionGuard g(a100_axes());
  CHECK(g.cell(5000, 0, 0, 1, 0).prefill_n == 1);  // 8192
  CHECK(g.cell(1, 0, 0, 1, 0).prefill_n == 0);     // 2048
  CHECK(g.cell(0, 0, 200000, 1, 0).decode_r == 3);  // 131072
  CHECK(g.cell(0, 0, 0, 33, 0).bs == 7);            // 40
  CHECK(g.cell(0, 0, 0, 4096, 0).bs == 19);         // clamps to 512
  CHECK(g.cell(0, 0, 0, 1, 99).partition == 5);
  const std::vector<std::int64_t> pts{2048, 8192};
  CHECK(bin_ceiling(pts, 2048) == 0);
  CHECK(bin_ceiling(pts, 2049) == 1);
}

TEST_CASE("guard flat index round-trips") {
  const ContentionGuard g(a100_axes());
  CHECK(g.raw().size() == 4 * 4 * 4 * 20 * 6);
  for (std::size_t i = 0; i < g.raw().size(); i += 7) CHECK(g.flat(g.unflat(i)) == i);
}

TEST_CASE("guard lookups and refinement") {
  ContentionGuard g(a100_axes(), 1.3, true);
  const GuardCell c = g.cell(4000, 100, 3000, 16, 2);
  CHECK(g.max_slowdown(c) == doctest::Approx(1.30));
  CHECK_FALSE(g.populated(c));
  g.set(c, 1.20);
  CHECK(g.max_slowdown(c) == doctest::Approx(1.20));
  g.set(c, 1.10);
  g.refine(c, 1.18);
  CHECK(g.max_slowdown(c) == doctest::Approx(1.18));
  g.refine(c, 1.05);
  CHECK(g.max_slowdown(c) == doctest::Approx(1.18));
  g.refine(c, 1.40);
  CHECK(g.max_slowdown(c) == doctest::Approx(1.40));
  g.refine(c, 0.5);
  CHECK(g.max_slowdown(c) == doctest::Approx(1.40));

  ContentionGuard capped(a100_axes(), 1.3, false);
  capped.set(c, 1.18);
  capped.refine(c, 1.40);
  CHECK(capped.max_slowdown(c) == doctest::Approx(1.30));

  const GuardCell fresh = g.cell(100000, 100000, 1, 1, 0);
  g.refine(fresh, 0.9);
  CHECK(g.max_slowdown(fresh) == doctest::Approx(1.0));
  CHECK(g.populated_count() == 2);
}

TEST_CASE("refinement converges to the true cell maxima") {
  TruthModel truth;
  const GuardAxes axes = a100_axes();
  ContentionGuard g(axes, 1.3, true);
  const ContentionGuard exact = truth.exact_guard(axes);
  std::mt19937_64 rng(1);
  // Observations drawn below each cell's max, then the max itself.
  for (std::size_t i = 0; i < g.raw().size(); ++i) {
    const GuardCell c = g.unflat(i);
    const double top = truth.cell_max(axes, c);
    std::uniform_real_distribution<double> below(1.0, top);
    g.refine(c, below(rng));
    g.refine(c, top);
  }
  for (std::size_t i = 0; i < g.raw().size(); ++i) CHECK(g.raw()[i] == exact.raw()[i]);
  std::vector<double> before = g.raw();
  for (std::size_t i = 0; i < g.raw().size(); ++i) g.refine(g.unflat(i), exact.raw()[i]);
  CHECK(g.raw() == before);
}

TEST_CASE("worst-case decode estimate") {
  ContentionGuard g(a100_axes());
  const DecodeTheta th{{0, 0, 50000}};
  const GuardCell c = g.cell(1000, 0, 100, 1, 0);
  g.set(c, 1.2);
  const PrefillDescriptor corun{1000, 0};
  const Tokens r = 100;
  const auto w = worst_case_decode(std::span(&r, 1), 0, th, g, corun);
  CHECK(w.solo_us == 50000);
  CHECK(w.factor == doctest::Approx(1.2));
  CHECK(w.worst_us == 60000);
  const auto solo = worst_case_decode(std::span(&r, 1), 0, th, g, std::nullopt);
  CHECK(solo.factor == 1.0);
  CHECK(solo.worst_us == solo.solo_us);
  const auto tight = worst_case_decode(std::span(&r, 1), 0, DecodeTheta{{0, 0, 90000}}, g, corun);
  CHECK(tight.worst_us == 108000);
  CHECK(tight.worst_us > 100000);
  CHECK(inflate(50000, 1.2) == 60000);
  CHECK(inflate(3, 1.0) == 3);
}

TEST_CASE("total-reused guard key") {
  ContentionGuard g(a100_axes(), 1.3, true, DecodeKey::TotalReused);
  const std::vector<Tokens> batch(4, 3000);  // max 3000 -> bin 1, total 12000 -> bin 2
  g.set(g.cell(1000, 0, 12000, 4, 0), 1.05);
  g.set(g.cell(1000, 0, 3000, 4, 0), 1.25);
  const auto w = worst_case_decode(batch, 0, DecodeTheta{{0, 0, 1000}}, g, PrefillDescriptor{1000, 0});
  CHECK(w.factor == doctest::Approx(1.05));
}

TEST_CASE("profile plan counts") {
  CHECK(gen_profile_plan(a100_axes()).size() == 7200);
  CHECK(gen_profile_plan(default_guard_axes(decode_partitions(GpuSpec::h100()))).size() == 8400);
  GuardAxes tiny;
  tiny.prefill_n = {2048};
  tiny.prefill_r = {2048};
  tiny.decode_r = {2048};
  tiny.batch_sizes = {1};
  tiny.partitions = {16};
  CHECK(gen_profile_plan(tiny).size() == 1);
  const auto plan = gen_profile_plan(a100_axes());
  for (const auto& p : plan) CHECK_FALSE((p.prefill_n == 131072 && p.prefill_r == 131072));
}

TEST_CASE("calibration file round trip") {
  TruthModel truth;
  const GuardAxes axes = a100_axes();
  Calibration cal{truth.exact_coeffs(axes.partitions), truth.exact_guard(axes)};
  std::ostringstream out;
  write_calibration(out, cal);
  std::istringstream in(out.str());
  const Calibration back = read_calibration(in);
  CHECK(back.guard.axes() == cal.guard.axes());
  CHECK(back.guard.raw() == cal.guard.raw());
  CHECK(back.guard.cap() == cal.guard.cap());
  REQUIRE(back.coeffs.prefill.size() == cal.coeffs.prefill.size());
  for (const auto& [sms, th] : cal.coeffs.prefill) CHECK(back.coeffs.prefill.at(sms) == th);
  for (const auto& [sms, th] : cal.coeffs.decode) CHECK(back.coeffs.decode.at(sms) == th);
  std::istringstream bad("{\"record\":\"cell\"}\n");
  CHECK_THROWS_AS(read_calibration(bad), SchemaError);
}

TEST_CASE("calibrate folds co-run samples into the guard") {
  TruthModel truth;
  const auto parts = decode_partitions(GpuSpec::a100());
  const GuardAxes axes = default_guard_axes(parts);
  const auto sms = profiled_sms(parts, 108);
  auto samples = synth_solo_profiles(truth, Phase::Prefill, sms, 100, 0.0, 1);
  const auto dec = synth_solo_profiles(truth, Phase::Decode, sms, 100, 0.0, 2);
  const auto corun = synth_corun_profiles(truth, axes, gen_profile_plan(axes), 1, 3);
  samples.insert(samples.end(), dec.begin(), dec.end());
  samples.insert(samples.end(), corun.begin(), corun.end());

  std::ostringstream out;
  write_profile_samples(out, samples);
  std::istringstream in(out.str());
  const auto reread = read_profile_samples(in);
  CHECK(reread.size() == samples.size());

  const Calibration cal = calibrate(reread, axes);
  CHECK(cal.coeffs.prefill.size() == sms.size());
  CHECK(cal.coeffs.decode.size() == sms.size());
  CHECK(cal.guard.populated_count() == 7200);
  for (std::size_t i = 0; i < cal.guard.raw().size(); ++i) {
    const double v = cal.guard.raw()[i];
    if (v == 0) continue;
    CHECK(v >= 1.0);
    CHECK(v <= truth.cell_max(axes, cal.guard.unflat(i)) * (1 + 1e-6));
  }
}
