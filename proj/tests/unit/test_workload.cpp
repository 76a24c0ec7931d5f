#include <doctest.h>

#include <random>
#include <sstream>

#include "muxsim/errors.hpp"
#include "muxsim/workload.hpp"

using namespace muxsim;

namespace {

Trace parse(const std::string& text, ReuseMode mode = ReuseMode::Reconstruct) {
  std::istringstream in(text);
  return parse_trace(in, mode);
}

TraceSpec poisson_spec(double rate, std::uint64_t seed, SimTime duration, DistSpec dist) {
  TraceSpec s;
  s.arrivals = PoissonArrivals{rate, seed, duration};
  s.lengths = dist;
  return s;
}

}  // namespace

TEST_CASE("single-line trace") {
  const Trace t = parse(R"({"id":"a","session":"s","arrival_us":0,"n_new":100,"n_reused":0,"n_out":10})");
  REQUIRE(t.requests.size() == 1);
  CHECK(t.requests[0].total_len() == 100);
  CHECK(t.requests[0].n_out == 10);
}

TEST_CASE("second turn reuses the accumulated session context") {
  const Trace t = parse(
      "{\"id\":\"b\",\"session\":\"s\",\"arrival_us\":50,\"n_new\":20,\"n_reused\":0,\"n_out\":5}\n"
      "{\"id\":\"a\",\"session\":\"s\",\"arrival_us\":0,\"n_new\":100,\"n_reused\":0,\"n_out\":50}\n");
  REQUIRE(t.requests.size() == 2);
  CHECK(t.requests[0].id == "a");
  CHECK(t.requests[1].n_reused == 150);
  CHECK(t.requests[1].turn == 1);
  REQUIRE(t.previous_turn(1).has_value());
  CHECK(*t.previous_turn(1) == 0);
  CHECK_FALSE(t.previous_turn(0).has_value());
  CHECK(t.sessions[0].accumulated_context == 150 + 20 + 5);

  const Trace given = parse(
      "{\"id\":\"a\",\"session\":\"s\",\"arrival_us\":0,\"n_new\":100,\"n_reused\":0,\"n_out\":50}\n"
      "{\"id\":\"b\",\"session\":\"s\",\"arrival_us\":50,\"n_new\":20,\"n_reused\":7,\"n_out\":5}\n",
      ReuseMode::AsGiven);
  CHECK(given.requests[1].n_reused == 7);
}

TEST_CASE("trace schema violations") {
  CHECK_THROWS_AS(parse(R"({"id":"a","session":"s","arrival_us":0,"n_new":0,"n_reused":0,"n_out":1})"),
                  SchemaError);
  CHECK_THROWS_AS(parse(R"({"id":"a","session":"s","arrival_us":0,"n_reused":0,"n_out":1})"), SchemaError);
  CHECK_THROWS_AS(parse("{"), SchemaError);
}

TEST_CASE("trace write/parse round trip") {
  TraceSpec spec = poisson_spec(2.0, 5, 20 * kSecUs, task_dist("tool_agent"));
  spec.multi_turn = task_multi_turn("tool_agent");
  const Trace t = gen_poisson(spec);
  std::ostringstream out;
  write_trace(out, t);
  const Trace back = parse(out.str());
  REQUIRE(back.requests.size() == t.requests.size());
  for (std::size_t i = 0; i < t.requests.size(); ++i) {
    CHECK(back.requests[i].id == t.requests[i].id);
    CHECK(back.requests[i].arrival == t.requests[i].arrival);
    CHECK(back.requests[i].n_new == t.requests[i].n_new);
    CHECK(back.requests[i].n_reused == t.requests[i].n_reused);
    CHECK(back.requests[i].n_out == t.requests[i].n_out);
  }
}

TEST_CASE("poisson count stays within three sigma") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Trace t = gen_poisson(poisson_spec(1.0, seed, 100 * kSecUs, task_dist("sharegpt")));
    CHECK(t.requests.size() >= 70);
    CHECK(t.requests.size() <= 130);
  }
}

TEST_CASE("poisson generation is deterministic in the seed") {
  const auto spec = poisson_spec(3.0, 11, 50 * kSecUs, task_dist("loogle"));
  const Trace a = gen_poisson(spec);
  const Trace b = gen_poisson(spec);
  REQUIRE(a.requests.size() == b.requests.size());
  for (std::size_t i = 0; i < a.requests.size(); ++i) {
    CHECK(a.requests[i].arrival == b.requests[i].arrival);
    CHECK(a.requests[i].n_new == b.requests[i].n_new);
    CHECK(a.requests[i].n_out == b.requests[i].n_out);
  }
}

TEST_CASE("degenerate length distribution") {
  const DistSpec d{{256, 256, 256}, {4, 4, 4}, std::nullopt};
  const Trace t = gen_poisson(poisson_spec(5.0, 3, 10 * kSecUs, d));
  REQUIRE_FALSE(t.requests.empty());
  for (const auto& r : t.requests) {
    CHECK(r.n_new == 256);
    CHECK(r.n_reused == 0);
    CHECK(r.n_out == 4);
  }
}

TEST_CASE("inter-arrival gaps have the exponential mean") {
  const Trace t = gen_poisson(poisson_spec(10.0, 99, 2000 * kSecUs, task_dist("sharegpt")));
  REQUIRE(t.requests.size() > 10000);
  const double mean_gap = static_cast<double>(t.requests.back().arrival - t.requests.front().arrival) /
                          static_cast<double>(t.requests.size() - 1);
  CHECK(mean_gap == doctest::Approx(1e5).epsilon(0.03));
}

TEST_CASE("clamping and mean fidelity of the length sampler") {
  for (const auto& task : task_names()) {
    const DistSpec d = task_dist(task);
    for (const LengthDist& ld : {d.input, d.output}) {
      ClampedLogNormal dist(ld);
      std::mt19937_64 rng(7);
      double sum = 0;
      const int n = 20000;
      for (int i = 0; i < n; ++i) {
        const Tokens v = dist.sample(rng);
        REQUIRE(v >= static_cast<Tokens>(ld.min));
        REQUIRE(v <= static_cast<Tokens>(ld.max));
        sum += static_cast<double>(v);
      }
      CHECK(sum / n == doctest::Approx(ld.mean).epsilon(0.10));
      CHECK(dist.analytic_mean() == doctest::Approx(ld.mean).epsilon(1e-6));
      CHECK(dist.sigma() == doctest::Approx(std::log(ld.max / ld.mean) / 3.0));
    }
  }
}

TEST_CASE("invalid length distributions are rejected") {
  CHECK_THROWS_AS(ClampedLogNormal(LengthDist{10, 5, 20}), ConfigError);
  CHECK_THROWS_AS(ClampedLogNormal(LengthDist{0, 5, 20}), ConfigError);
  CHECK_THROWS_AS(task_dist("nope"), ConfigError);
}

TEST_CASE("sharegpt-shaped trace roughly matches the table") {
  const Trace t = gen_poisson(poisson_spec(20.0, 4, 1000 * kSecUs, task_dist("sharegpt")));
  const TraceStats st = trace_stats(t.requests);
  CHECK(st.input.min >= 4);
  CHECK(st.input.max <= 1024);
  CHECK(st.output.min >= 4);
  CHECK(st.output.max <= 1838);
  CHECK(st.input.mean == doctest::Approx(226).epsilon(0.10));
  CHECK(st.output.mean == doctest::Approx(195).epsilon(0.10));
}

TEST_CASE("openthoughts reuses the constant prompt") {
  const Trace t = gen_poisson(poisson_spec(2.0, 4, 60 * kSecUs, task_dist("openthoughts")));
  for (const auto& r : t.requests) CHECK(r.n_reused == 243);
}

TEST_CASE("trace_stats arithmetic") {
  Request a;
  a.n_out = 10;
  Request b;
  b.n_out = 30;
  const TraceStats st = trace_stats({a, b});
  CHECK(st.output.mean == 20);
  CHECK(st.output.min == 10);
  CHECK(st.output.max == 30);
  const TraceStats one = trace_stats({a});
  CHECK(one.output.min == one.output.mean);
  CHECK(one.output.max == one.output.mean);
  CHECK_THROWS_AS(trace_stats({}), EmptyTrace);
}

TEST_CASE("multi-turn sessions accumulate context and respect think time") {
  TraceSpec spec = poisson_spec(4.0, 8, 600 * kSecUs, task_dist("conversation"));
  spec.multi_turn = task_multi_turn("conversation");
  const Trace t = gen_poisson(spec);
  std::size_t later_turns = 0;
  for (const auto& s : t.sessions) {
    Tokens acc = 0;
    for (std::size_t k = 0; k < s.turns.size(); ++k) {
      const Request& r = t.requests[s.turns[k]];
      CHECK(r.turn == static_cast<int>(k));
      CHECK(r.n_reused == acc);
      CHECK(r.total_len() <= spec.multi_turn->context_cap);
      if (k > 0) {
        ++later_turns;
        CHECK(r.arrival > t.requests[s.turns[k - 1]].arrival);
      }
      acc = r.n_reused + r.n_new + r.n_out;
    }
    CHECK(s.accumulated_context == acc);
  }
  CHECK(later_turns > 0);
}

TEST_CASE("merged traces keep sessions apart") {
  const Trace a = gen_poisson(poisson_spec(1.0, 1, 30 * kSecUs, task_dist("sharegpt")));
  const Trace b = gen_poisson(poisson_spec(1.0, 2, 30 * kSecUs, task_dist("loogle")));
  const Trace m = merge_traces(a, b);
  CHECK(m.requests.size() == a.requests.size() + b.requests.size());
  CHECK(m.sessions.size() == a.sessions.size() + b.sessions.size());
  for (std::size_t i = 1; i < m.requests.size(); ++i) CHECK(m.requests[i - 1].arrival <= m.requests[i].arrival);
}
