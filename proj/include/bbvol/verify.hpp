#pragma once

// Headless battery of analytic identities behind `verify-math`.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbvol/estimator.hpp"
#include "bbvol/phantom.hpp"
#include "bbvol/rng.hpp"
#include "bbvol/sampler.hpp"
#include "bbvol/schedule.hpp"

namespace bbvol {

struct CheckResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct VerifyOptions {
  ScheduleParams schedule;
  std::uint64_t seed = 1234;
  std::size_t mc_samples = 100000;
  std::size_t volume_size = 16;
  double delta_cond_scale = 1.0;  // != 1 injects a wrong transition variance
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
};

inline nlohmann::json to_json(const VerifyReport& r) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : r.checks)
    arr.push_back({{"name", c.name}, {"error", c.error}, {"tolerance", c.tolerance}, {"passed", c.passed}});
  return {{"schema", "bbvol.verify_report"}, {"version", 1}, {"passed", r.passed()}, {"checks", arr}};
}

inline VerifyReport verify_report_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "bbvol.verify_report") throw FormatError("verify report: wrong schema tag", 0);
  VerifyReport r;
  for (const auto& c : j.at("checks"))
    r.checks.push_back({c.at("name").get<std::string>(), c.at("error").get<double>(), c.at("tolerance").get<double>(),
                        c.at("passed").get<bool>()});
  return r;
}

namespace verify {

inline CheckResult make(std::string name, double err, double tol) { return {std::move(name), err, tol, err < tol}; }

/// Largest relative deviation of (c_x, c_y, c_eps, tilde_delta) from the
/// conjugate combination of the t-1 marginal with the transition kernel,
/// where the kernel variance is rebuilt from the marginal variances.
inline double bayes_consistency_error(const ScheduleTable& tab, int t, double x0, double y, double xt) {
  const double m = tab.m(t), mp = tab.m(t - 1);
  const double a = (1 - m) / (1 - mp), b = m - mp * a;
  const double v = tab.delta(t) - tab.delta(t - 1) * a * a;
  const double prior_mean = (1 - mp) * x0 + mp * y, prior_var = tab.delta(t - 1);
  const double post_var = 1.0 / (1.0 / prior_var + a * a / v);
  const double post_mean = post_var * (prior_mean / prior_var + a * (xt - b * y) / v);
  const double impl_mean = tab.c_x(t) * xt + tab.c_y(t) * y - tab.c_eps(t) * (xt - x0);
  const double e_mean = std::abs(impl_mean - post_mean) / std::max(std::abs(post_mean), 1e-300);
  const double e_var = std::abs(tab.tilde_delta(t) - post_var) / post_var;
  const double e_dc = std::abs(tab.delta_cond(t) - v) / v;
  return std::max({e_mean, e_var, e_dc});
}

inline CheckResult bayes_check(const ScheduleTable& tab, Rng& rng, int n_times, double tol = 1e-10) {
  double worst = 0.0;
  for (int k = 0; k < n_times; ++k) {
    const int t = static_cast<int>(rng.uniform_int(2, tab.T() - 1));
    const double x0 = rng.uniform(0.2, 1.0), y = rng.uniform(0.2, 1.0);
    const double xt = (1 - tab.m(t)) * x0 + tab.m(t) * y + std::sqrt(tab.delta(t)) * rng.normal();
    worst = std::max(worst, bayes_consistency_error(tab, t, x0, y, xt));
  }
  return make("posterior coefficients vs conjugate Bayes (" + std::to_string(n_times) + " random t)", worst, tol);
}

/// x_{t-1} from its marginal, then x_t through the transition kernel; the
/// empirical moments must match the t marginal.
struct CompositionError {
  double mean_rel = 0.0, var_rel = 0.0;
};

inline CompositionError composition_error(const ScheduleTable& tab, int t, double x0, double y, std::size_t n, Rng& rng) {
  const double mp = tab.m(t - 1), m = tab.m(t);
  const double a = (1 - m) / (1 - mp), b = m - mp * a;
  const double sp = std::sqrt(tab.delta(t - 1)), sc = std::sqrt(tab.delta_cond(t));
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double xprev = (1 - mp) * x0 + mp * y + sp * rng.normal();
    const double xt = a * xprev + b * y + sc * rng.normal();
    s1 += xt;
    s2 += xt * xt;
  }
  const double mean = s1 / n, var = s2 / n - mean * mean;
  const double want_mean = (1 - m) * x0 + m * y, want_var = tab.delta(t);
  return {std::abs(mean - want_mean) / std::abs(want_mean), std::abs(var - want_var) / want_var};
}

inline std::vector<CheckResult> composition_checks(const ScheduleTable& tab, Rng& rng, std::size_t n) {
  CompositionError worst;
  const int T = tab.T();
  for (int t : {std::max(2, T / 10), T / 4, T / 2, (3 * T) / 4, std::min(T - 1, (9 * T) / 10)}) {
    const auto e = composition_error(tab, t, 0.3, 0.8, n, rng);
    worst.mean_rel = std::max(worst.mean_rel, e.mean_rel);
    worst.var_rel = std::max(worst.var_rel, e.var_rel);
  }
  return {make("marginal/transition composition: mean (Monte Carlo)", worst.mean_rel, 0.01),
          make("marginal/transition composition: variance (Monte Carlo)", worst.var_rel, 0.02)};
}

inline CheckResult schedule_shape_check(const ScheduleTable& tab) {
  double bad = 0.0;
  const int T = tab.T();
  bad += std::abs(tab.m(0)) + std::abs(tab.m(T) - 1) + std::abs(tab.delta(0)) + std::abs(tab.delta(T));
  for (int t = 1; t <= T; ++t) {
    if (!(tab.m(t) > tab.m(t - 1))) bad += 1;
    if (t < T && !(tab.delta(t) > 0)) bad += 1;
    if (t < T && tab.delta_cond(t) < 0) bad += 1;
    for (double v : {tab.delta_cond(t), tab.tilde_delta(t), tab.c_x(t), tab.c_y(t), tab.c_eps(t)})
      if (!std::isfinite(v)) bad += 1;
  }
  return make("schedule endpoints, monotonicity, finiteness", bad, 1e-15);
}

inline double max_abs_diff(const Volume& a, const Volume& b) {
  double e = 0.0;
  for (std::size_t k = 0; k < a.data.size(); ++k) e = std::max(e, std::abs(a.data[k] - b.data[k]));
  return e;
}

}  // namespace verify

inline VerifyReport run_verification(const VerifyOptions& opt) {
  VerifyReport rep;
  const auto tab = build_schedule_impl(opt.schedule, opt.delta_cond_scale);
  Rng rng(opt.seed);

  rep.checks.push_back(verify::schedule_shape_check(tab));
  rep.checks.push_back(verify::bayes_check(tab, rng, 50));
  for (auto& c : verify::composition_checks(tab, rng, opt.mc_samples)) rep.checks.push_back(std::move(c));

  PhantomConfig pc;
  pc.Z = pc.H = pc.W = opt.volume_size;
  pc.seed = opt.seed;
  const auto pair = generate_pair(pc);
  OracleEstimator oracle(1);
  oracle.add(pair.target);
  const StyleKey key = compute_style_key(pair.target);

  // forward endpoints
  {
    Volume noise(pair.target.Z, pair.target.H, pair.target.W);
    for (double& v : noise.data) v = rng.normal();
    const double e0 = verify::max_abs_diff(forward_sample(pair.target, pair.source, 0, noise, tab), pair.target);
    const double eT = verify::max_abs_diff(forward_sample(pair.target, pair.source, tab.T(), noise, tab), pair.source);
    rep.checks.push_back(verify::make("forward sample endpoints", std::max(e0, eT), 1e-15));
  }

  // end-to-end oracle recovery
  for (int steps : {10, 50}) {
    for (int M : {0, 1}) {
      SamplerConfig sc{steps, true, M};
      const auto r = ista_sample(pair.source, key, sc, oracle, tab);
      rep.checks.push_back(verify::make("oracle ISTA recovery, " + std::to_string(steps) + " steps, M=" + std::to_string(M),
                                        verify::max_abs_diff(r.x0_hat, pair.target), 1e-5));
    }
  }

  // score identity and correction fixed point at random t
  double score_err = 0.0, fixed_err = 0.0;
  for (int k = 0; k < 20; ++k) {
    const int t = static_cast<int>(rng.uniform_int(1, tab.T() - 1));
    Volume noise(pair.target.Z, pair.target.H, pair.target.W);
    for (double& v : noise.data) v = rng.normal();
    const Volume X = forward_sample(pair.target, pair.source, t, noise, tab);
    const Volume S = score(X, pair.source, key, t, oracle, tab);
    const double m = tab.m(t), d = tab.delta(t);
    for (std::size_t i = 0; i < S.data.size(); ++i) {
      const double closed = -(X.data[i] - ((1 - m) * pair.target.data[i] + m * pair.source.data[i])) / d;
      score_err = std::max(score_err, std::abs(S.data[i] - closed) / std::max(std::abs(closed), 1.0));
    }
    if (k < 4) {
      Volume mean = pair.target;
      mean.id = pair.source.id;
      for (std::size_t i = 0; i < mean.data.size(); ++i)
        mean.data[i] = (1 - m) * pair.target.data[i] + m * pair.source.data[i];
      for (int M : {1, 2})
        fixed_err = std::max(fixed_err, verify::max_abs_diff(correct(mean, pair.source, key, t, 0.5, M, oracle, tab), mean));
    }
  }
  rep.checks.push_back(verify::make("score via co-prediction vs closed form (20 random t)", score_err, 1e-10));
  rep.checks.push_back(verify::make("correction fixed point at the marginal mean", fixed_err, 1e-12));
  return rep;
}

}  // namespace bbvol
