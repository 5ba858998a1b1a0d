#include <gtest/gtest.h>

#include "streamacc/rtsched.hpp"

using namespace streamacc;

namespace {

LatencyProfile quiet_profile() {
  LatencyProfile p;
  p.tau_jitter = 0.0;
  p.jitter.kind = JitterKind::none;
  return p;
}

}  // namespace

TEST(Feasibility, DefaultProfileExamples) {
  const LatencyProfile p;  // tau_sys 0.3, tau_jitter 0.1, t_gen = 0.01 + 0.25 k
  const auto a = feasible(StreamSpec::from_seconds(-1.0, 0.04), p);
  EXPECT_TRUE(a.feasible);
  EXPECT_EQ(a.latency_margin, 600'000'000);
  EXPECT_EQ(a.throughput_margin, 20'000'000);
  const auto b = feasible(StreamSpec::from_seconds(-0.4, 0.04), p);
  EXPECT_TRUE(b.feasible);  // exactly on the latency boundary
  EXPECT_EQ(b.latency_margin, 0);
  const auto c = feasible(StreamSpec::from_seconds(-0.2, 1.0), p);
  EXPECT_FALSE(c.feasible);
  EXPECT_FALSE(c.latency_ok);
  EXPECT_TRUE(c.throughput_ok);
  const auto d = feasible(StreamSpec::from_seconds(0.2, 0.04), p);
  EXPECT_FALSE(d.latency_ok);
  LatencyProfile slow = p;
  slow.gen_a = 0.05;
  EXPECT_FALSE(feasible(StreamSpec::from_seconds(-1.0, 0.04), slow).throughput_ok);
}

TEST(Feasibility, DefaultGridRegion) {
  const auto cells = sweep_feasibility(default_t_f_grid(), default_k_grid(), LatencyProfile{});
  ASSERT_EQ(cells.size(), 55u);
  for (const auto& c : cells) EXPECT_EQ(c.report.feasible, c.t_f_seconds <= -0.4) << c.t_f_seconds << " " << c.k_seconds;
  const std::string csv = feasibility_csv(cells);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 56);
}

TEST(Feasibility, LatencyRegionIsMonotoneInLookahead) {
  LatencyProfile p;
  p.gen_b = 0.9;
  for (int k = 1; k <= 20; ++k) {
    bool seen_infeasible = false;
    for (int t_f = -250; t_f <= 50; ++t_f) {
      const bool ok = feasible(StreamSpec{t_f, k}, p).latency_ok;
      if (!ok) seen_infeasible = true;
      ASSERT_FALSE(ok && seen_infeasible) << "t_f=" << t_f;
    }
  }
}

TEST(Simulate, ZeroJitterMatchesFeasibilityOnHundredCells) {
  LatencyProfile p = quiet_profile();
  p.gen_a = 0.05;
  p.gen_b = 0.5;  // throughput fails below k = 0.1 s, boundary at 0.1 s
  const std::vector<int> t_fs = {-200, -60, -20, -16, -15, -14, -10, -1, 0, 10};
  const std::vector<int> ks = {1, 2, 3, 4, 5, 6, 10, 25, 50, 100};
  std::size_t infeasible_thr = 0, infeasible_lat = 0;
  for (int t_f : t_fs)
    for (int k : ks) {
      const StreamSpec s{t_f, k};
      const auto r = feasible(s, p);
      const auto tr = simulate(s, p, 2000, 1);
      EXPECT_EQ(tr.underruns == 0, r.feasible) << "t_f=" << t_f << " k=" << k << " underruns=" << tr.underruns;
      infeasible_thr += !r.throughput_ok;
      infeasible_lat += !r.latency_ok;
    }
  EXPECT_GT(infeasible_thr, 0u);
  EXPECT_GT(infeasible_lat, 0u);
}

TEST(Simulate, UniformJitterExceedanceMatchesClosedForm) {
  LatencyProfile p = quiet_profile();
  p.jitter = {JitterKind::uniform, 0.0, 0.2};
  for (double lead : {0.4, 0.36, 0.32}) {
    const StreamSpec s = StreamSpec::from_seconds(-lead, 1.0);
    const auto tr = simulate(s, p, 20000, 77);
    const double rate = static_cast<double>(tr.underruns) / 20000.0;
    EXPECT_NEAR(rate, uniform_exceedance(0.0, 0.2, lead - p.tau_sys), 0.01) << "lead " << lead;
  }
  EXPECT_DOUBLE_EQ(uniform_exceedance(0.0, 0.2, 0.1), 0.5);
  EXPECT_DOUBLE_EQ(uniform_exceedance(0.0, 0.2, -0.1), 1.0);
  EXPECT_DOUBLE_EQ(uniform_exceedance(0.0, 0.2, 0.3), 0.0);
}

TEST(Simulate, MoreLeadNeverAddsUnderruns) {
  LatencyProfile p = quiet_profile();
  p.jitter = {JitterKind::truncated_normal, 0.0, 0.3, 0.1, 0.05};
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (int t_f = 0; t_f >= -40; --t_f) {
    const auto tr = simulate(StreamSpec{t_f, 25}, p, 500, 3);
    EXPECT_LE(tr.underruns, prev) << "t_f=" << t_f;
    prev = tr.underruns;
  }
  EXPECT_EQ(prev, 0u);
}

TEST(Simulate, DeterministicAndOrdered) {
  LatencyProfile p = quiet_profile();
  p.jitter = {JitterKind::uniform, 0.0, 0.4};
  const StreamSpec s{-20, 10};
  const auto a = simulate(s, p, 300, 9), b = simulate(s, p, 300, 9), c = simulate(s, p, 300, 10);
  EXPECT_EQ(a.to_csv(), b.to_csv());
  EXPECT_NE(a.to_csv(), c.to_csv());
  for (std::size_t j = 0; j < a.chunks.size(); ++j) {
    const auto& x = a.chunks[j];
    EXPECT_GE(x.start, x.request);
    EXPECT_GT(x.complete, x.start);
    EXPECT_EQ(x.slack, x.deadline - x.complete);
    if (j > 0) {
      EXPECT_GE(x.start, a.chunks[j - 1].start);
      EXPECT_GT(x.deadline, a.chunks[j - 1].deadline);
    }
  }
  EXPECT_DOUBLE_EQ(a.update_rate_hz, 5.0);
}

TEST(Simulate, GenerationSlowerThanPlaybackFallsBehind) {
  LatencyProfile p = quiet_profile();
  p.gen_a = 0.0;
  p.gen_b = 2.0;  // t_gen = 2k
  const StreamSpec s = StreamSpec::from_seconds(-4.0, 0.2);
  EXPECT_FALSE(feasible(s, p).throughput_ok);
  const auto tr = simulate(s, p, 200, 1);
  EXPECT_GT(tr.underruns, 0u);
  // Once late, the queue only grows.
  bool late = false;
  for (const auto& c : tr.chunks) {
    if (late) {
      EXPECT_TRUE(c.underrun);
    }
    late |= c.underrun;
  }
  // Lateness of the last chunk: queue delay 199 * 0.2 s minus slack 3.7 s.
  EXPECT_EQ(tr.max_lateness, 199 * 200'000'000LL - 3'700'000'000LL);
}

TEST(Jitter, ParseValidateAndBounds) {
  EXPECT_EQ(parse_jitter_kind("uniform"), JitterKind::uniform);
  EXPECT_EQ(jitter_kind_name(parse_jitter_kind("truncated_normal")), "truncated_normal");
  EXPECT_THROW(parse_jitter_kind("gauss"), std::invalid_argument);
  EXPECT_THROW((JitterModel{JitterKind::uniform, 0.2, 0.1}.validate()), std::invalid_argument);
  const JitterModel tn{JitterKind::truncated_normal, 0.01, 0.05, 0.0, 0.05};
  Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    const Nanos e = tn.draw(rng);
    ASSERT_GE(e, 10'000'000);
    ASSERT_LE(e, 50'000'000);
  }
}

TEST(FitGenTime, RecoversExactParameters) {
  const std::vector<double> ks = {0.02, 0.04, 0.1, 0.2, 0.5, 1.0, 2.0};
  std::vector<double> ts;
  for (double k : ks) ts.push_back(0.02 + 0.3 * std::pow(k, 1.25));
  const auto f = fit_gen_time(ks, ts);
  EXPECT_NEAR(f.alpha, 1.25, 1e-9);
  EXPECT_NEAR(f.a, 0.02, 1e-9);
  EXPECT_NEAR(f.b, 0.3, 1e-9);
  EXPECT_LT(f.rmse, 1e-12);
}

TEST(FitGenTime, NoisySamplesAndConstraints) {
  const std::vector<double> ks = {0.02, 0.04, 0.1, 0.2, 0.5, 1.0, 2.0, 0.02, 0.1, 1.0};
  Rng rng(6);
  std::vector<double> ts;
  for (double k : ks) ts.push_back(0.01 + 0.25 * k + 0.002 * (uniform01(rng) - 0.5));
  const auto f = fit_gen_time(ks, ts);
  EXPECT_NEAR(f.alpha, 1.0, 0.05);
  EXPECT_NEAR(f.b, 0.25, 0.02);
  EXPECT_NEAR(f.a, 0.01, 0.003);
  // Decreasing data cannot be fit with b >= 0.
  const auto g = fit_gen_time({0.1, 0.2, 0.3}, {0.3, 0.2, 0.1});
  EXPECT_EQ(g.b, 0.0);
  EXPECT_NEAR(g.a, 0.2, 1e-12);
  EXPECT_THROW(fit_gen_time({0.1}, {}), std::invalid_argument);
}
