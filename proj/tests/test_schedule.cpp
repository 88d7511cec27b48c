#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bbvol/rng.hpp"
#include "bbvol/schedule.hpp"
#include "bbvol/verify.hpp"

using namespace bbvol;

namespace {

// Posterior of x_{t-1} given x_t, x0, y by direct numerical integration of
// prior(x_{t-1}) * kernel(x_t | x_{t-1}) on a fine grid (composite Simpson).
struct Moments {
  double mean, var;
};

Moments quadrature_posterior(int T, double s, int t, double xt, double x0, double y) {
  auto m = [&](int k) { return static_cast<double>(k) / T; };
  auto dl = [&](int k) { return 2 * s * (m(k) - m(k) * m(k)); };
  const double a = (1 - m(t)) / (1 - m(t - 1)), b = m(t) - m(t - 1) * a;
  const double v = dl(t) - dl(t - 1) * a * a;
  const double pm = (1 - m(t - 1)) * x0 + m(t - 1) * y, pv = dl(t - 1);
  auto f = [&](double x) {
    const double r = xt - a * x - b * y;
    return std::exp(-(x - pm) * (x - pm) / (2 * pv) - r * r / (2 * v));
  };
  const double sd = std::sqrt(std::min(pv, v / (a * a)));
  const double c = xt / a - b * y / a;
  const double lo = std::min(pm, c) - 12 * sd - 1, hi = std::max(pm, c) + 12 * sd + 1;
  const int n = 400000;
  const double h = (hi - lo) / n;
  double z = 0, s1 = 0, s2 = 0;
  for (int k = 0; k <= n; ++k) {
    const double x = lo + k * h;
    const double w = (k == 0 || k == n) ? 1 : (k % 2 ? 4 : 2);
    const double fx = w * f(x);
    z += fx;
    s1 += fx * x;
    s2 += fx * x * x;
  }
  const double mean = s1 / z;
  return {mean, s2 / z - mean * mean};
}

}  // namespace

TEST(Schedule, Endpoints) {
  const auto tab = build_schedule({1000, 1.0});
  EXPECT_EQ(tab.m(1000), 1.0);
  EXPECT_EQ(tab.delta(1000), 0.0);
  EXPECT_EQ(tab.m(0), 0.0);
  EXPECT_EQ(tab.delta(0), 0.0);
}

TEST(Schedule, MidpointVariance) {
  const auto tab = build_schedule({1000, 1.0});
  EXPECT_DOUBLE_EQ(tab.m(500), 0.5);
  EXPECT_DOUBLE_EQ(tab.delta(500), 0.5);
}

TEST(Schedule, FirstStepPosteriorIsDegenerate) {
  const auto tab = build_schedule({1000, 1.0});
  EXPECT_EQ(tab.tilde_delta(1), 0.0);
}

TEST(Schedule, RejectsBadParameters) {
  EXPECT_THROW(build_schedule({1, 1.0}), ParameterError);
  EXPECT_THROW(build_schedule({1000, 0.0}), ParameterError);
  EXPECT_THROW(build_schedule({1000, -2.0}), ParameterError);
  const auto tab = build_schedule({10, 1.0});
  EXPECT_THROW(tab.m(11), IndexError);
  EXPECT_THROW(tab.delta(-1), IndexError);
}

TEST(Schedule, TablesFiniteAndOrdered) {
  for (double s : {0.5, 1.0, 2.0}) {
    const auto tab = build_schedule({1000, s});
    for (int t = 1; t < 1000; ++t) {
      EXPECT_GT(tab.m(t), tab.m(t - 1));
      EXPECT_GT(tab.delta(t), 0.0);
      EXPECT_GE(tab.delta_cond(t), 0.0);
      for (double v : {tab.c_x(t), tab.c_y(t), tab.c_eps(t), tab.tilde_delta(t)}) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(PosteriorMean, FrozenScalarInstance) {
  // Values from a 40-digit quadrature of the conjugate posterior.
  const auto tab = build_schedule({1000, 1.0});
  const std::vector<double> xt{0.7}, x0{0.2}, y{0.9};
  EXPECT_NEAR(posterior_mean(tab, 500, xt, x0, y)[0], 0.699, 1e-12);
  EXPECT_NEAR(tab.tilde_delta(500), 0.001996, 1e-12);
  EXPECT_NEAR(posterior_mean(tab, 250, std::vector<double>{0.1}, std::vector<double>{0.6}, std::vector<double>{0.3})[0],
              0.102, 1e-12);
  EXPECT_NEAR(tab.tilde_delta(250), 0.001992, 1e-12);
  EXPECT_NEAR(posterior_mean(tab, 999, std::vector<double>{0.85}, std::vector<double>{0.4}, std::vector<double>{0.8})[0],
              0.8495495495495495, 1e-12);
  EXPECT_NEAR(tab.tilde_delta(999), 0.001997997997997998, 1e-12);
}

TEST(PosteriorMean, MatchesQuadratureOracle) {
  const auto tab = build_schedule({1000, 1.0});
  Rng rng(99);
  for (int k = 0; k < 12; ++k) {
    const int t = static_cast<int>(rng.uniform_int(2, 999));
    const double x0 = rng.uniform(0, 1), y = rng.uniform(0, 1), xt = rng.uniform(0, 1);
    const auto ref = quadrature_posterior(1000, 1.0, t, xt, x0, y);
    const double got = posterior_mean(tab, t, std::vector<double>{xt}, std::vector<double>{x0}, std::vector<double>{y})[0];
    EXPECT_NEAR(got, ref.mean, 1e-8) << "t=" << t;
    EXPECT_NEAR(tab.tilde_delta(t), ref.var, 1e-8 * std::max(1.0, ref.var)) << "t=" << t;
  }
}

TEST(PosteriorMean, PinnedEndIsPreviousMarginal) {
  const auto tab = build_schedule({1000, 1.0});
  const double x0 = 0.37, y = 0.81;
  const double got = posterior_mean(tab, 1000, std::vector<double>{y}, std::vector<double>{x0}, std::vector<double>{y})[0];
  EXPECT_NEAR(got, (1 - tab.m(999)) * x0 + tab.m(999) * y, 1e-15);
  EXPECT_DOUBLE_EQ(tab.tilde_delta(1000), tab.delta(999));
}

TEST(PosteriorMean, ConstantBridgeIsFixed) {
  const auto tab = build_schedule({1000, 1.0});
  for (int t : {1, 2, 137, 500, 999, 1000}) {
    const std::vector<double> c{0.42, 0.42};
    const auto r = posterior_mean(tab, t, c, c, c);
    EXPECT_NEAR(r[0], 0.42, 1e-14) << t;
    EXPECT_NEAR(r[1], 0.42, 1e-14) << t;
  }
}

TEST(PosteriorMean, FirstStepCollapsesOntoPrediction) {
  const auto tab = build_schedule({1000, 1.0});
  const auto r = posterior_mean(tab, 1, std::vector<double>{0.9}, std::vector<double>{0.25}, std::vector<double>{0.6});
  EXPECT_NEAR(r[0], 0.25, 1e-14);
}

TEST(PosteriorMean, Errors) {
  const auto tab = build_schedule({1000, 1.0});
  const std::vector<double> a{1.0}, b{1.0, 2.0};
  EXPECT_THROW(posterior_mean(tab, 0, a, a, a), IndexError);
  EXPECT_THROW(posterior_mean(tab, 1001, a, a, a), IndexError);
  EXPECT_THROW(posterior_mean(tab, 5, a, b, a), DimensionError);
}

TEST(Subsequence, Examples) {
  const auto full = subsequence(1000, 1000);
  ASSERT_EQ(full.size(), 1001u);
  for (int k = 0; k <= 1000; ++k) EXPECT_EQ(full[k], 1000 - k);
  const auto hundred = subsequence(1000, 100);
  ASSERT_EQ(hundred.size(), 101u);
  for (int k = 0; k <= 100; ++k) EXPECT_EQ(hundred[k], 1000 - 10 * k);
  EXPECT_EQ(subsequence(10, 2), (std::vector<int>{10, 5, 0}));
}

TEST(Subsequence, StrictlyDecreasingForAllCounts) {
  for (int n = 1; n <= 97; ++n) {
    const auto ts = subsequence(97, n);
    EXPECT_EQ(ts.front(), 97);
    EXPECT_EQ(ts.back(), 0);
    for (std::size_t k = 1; k < ts.size(); ++k) EXPECT_LT(ts[k], ts[k - 1]);
  }
  EXPECT_THROW(subsequence(10, 0), ParameterError);
  EXPECT_THROW(subsequence(10, 11), ParameterError);
}

TEST(Schedule, BayesConsistencyAtRandomTimes) {
  const auto tab = build_schedule({1000, 1.0});
  Rng rng(5);
  EXPECT_TRUE(verify::bayes_check(tab, rng, 50).passed);
}

TEST(Schedule, MonteCarloComposition) {
  const auto tab = build_schedule({1000, 1.0});
  Rng rng(2024);
  for (const auto& c : verify::composition_checks(tab, rng, 100000)) EXPECT_TRUE(c.passed) << c.name << " " << c.error;
}

TEST(Schedule, WrongTransitionVarianceIsDetected) {
  const auto bad = build_schedule_impl({1000, 1.0}, 1.05);
  Rng rng(5);
  EXPECT_FALSE(verify::bayes_check(bad, rng, 50).passed);
}
