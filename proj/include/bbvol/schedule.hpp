#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bbvol/error.hpp"

namespace bbvol {

struct ScheduleParams {
  int T = 1000;
  double s = 1.0;  // variance scale

  void validate() const {
    if (T < 2) throw ParameterError("schedule: T must be >= 2, got " + std::to_string(T));
    if (!(s > 0.0) || !std::isfinite(s)) throw ParameterError("schedule: s must be a positive finite number");
  }
};

/// Precomputed Brownian-bridge schedule, indexed by t = 0..T.
///
/// Marginal:    x_t ~ N((1 - m_t) x0 + m_t y, delta_t)
/// Transition:  x_t | x_{t-1} ~ N(a_t x_{t-1} + (m_t - m_{t-1} a_t) y, delta_cond_t),
///              a_t = (1 - m_t) / (1 - m_{t-1})
/// Posterior:   x_{t-1} | x_t, x0, y ~ N(c_x x_t + c_y y - c_eps (x_t - x0), tilde_delta_t)
///
/// The posterior is written in terms of the bridge direction x_t - x0, which
/// is exactly what the noise estimator predicts. c_eps is stored positive.
///
/// At t = T the bridge is pinned (delta_T = 0) and x_T carries no information
/// about x_{T-1}; the coefficients there hold their limiting values, so the
/// posterior collapses to the t = T - 1 marginal. At t = 1, delta_0 = 0 and
/// the posterior collapses onto x0.
class ScheduleTable {
 public:
  int T() const { return T_; }
  double s() const { return s_; }

  double m(int t) const { return m_[idx(t)]; }
  double delta(int t) const { return delta_[idx(t)]; }
  double delta_cond(int t) const { return delta_cond_[idx(t)]; }
  double tilde_delta(int t) const { return tilde_delta_[idx(t)]; }
  double c_x(int t) const { return c_x_[idx(t)]; }
  double c_y(int t) const { return c_y_[idx(t)]; }
  double c_eps(int t) const { return c_eps_[idx(t)]; }

  std::span<const double> m() const { return m_; }
  std::span<const double> delta() const { return delta_; }
  std::span<const double> delta_cond() const { return delta_cond_; }
  std::span<const double> tilde_delta() const { return tilde_delta_; }
  std::span<const double> c_x() const { return c_x_; }
  std::span<const double> c_y() const { return c_y_; }
  std::span<const double> c_eps() const { return c_eps_; }

 private:
  friend ScheduleTable build_schedule_impl(const ScheduleParams&, double);

  std::size_t idx(int t) const {
    if (t < 0 || t > T_) throw IndexError("schedule: t=" + std::to_string(t) + " outside [0, " + std::to_string(T_) + "]");
    return static_cast<std::size_t>(t);
  }

  int T_ = 0;
  double s_ = 0.0;
  std::vector<double> m_, delta_, delta_cond_, tilde_delta_, c_x_, c_y_, c_eps_;
};

// delta_cond_scale != 1 corrupts the transition variance; only the
// verification battery's negative control uses it.
inline ScheduleTable build_schedule_impl(const ScheduleParams& params, double delta_cond_scale) {
  params.validate();
  const int T = params.T;
  const std::size_t n = static_cast<std::size_t>(T) + 1;

  ScheduleTable tab;
  tab.T_ = T;
  tab.s_ = params.s;
  tab.m_.resize(n);
  tab.delta_.resize(n);
  tab.delta_cond_.assign(n, 0.0);
  tab.tilde_delta_.assign(n, 0.0);
  tab.c_x_.assign(n, 0.0);
  tab.c_y_.assign(n, 0.0);
  tab.c_eps_.assign(n, 0.0);

  for (int t = 0; t <= T; ++t) {
    const double mt = static_cast<double>(t) / static_cast<double>(T);
    tab.m_[t] = mt;
    tab.delta_[t] = 2.0 * params.s * (mt - mt * mt);
  }
  tab.delta_[0] = 0.0;
  tab.delta_[T] = 0.0;

  for (int t = 1; t < T; ++t) {
    const double a = (1.0 - tab.m_[t]) / (1.0 - tab.m_[t - 1]);
    double dc = tab.delta_[t] - tab.delta_[t - 1] * a * a;
    dc = (dc < 0.0 ? 0.0 : dc) * delta_cond_scale;
    tab.delta_cond_[t] = dc;

    const double dt = tab.delta_[t];
    const double dprev = tab.delta_[t - 1];
    const double ratio = dc / dt;
    tab.tilde_delta_[t] = dprev == 0.0 ? 0.0 : dc * dprev / dt;
    tab.c_eps_[t] = (1.0 - tab.m_[t - 1]) * ratio;
    tab.c_x_[t] = (1.0 - tab.m_[t - 1]) * ratio + dprev * a / dt;
    tab.c_y_[t] = tab.m_[t - 1] * ratio - dprev * a * (tab.m_[t] - tab.m_[t - 1] * a) / dt;
  }

  // Pinned end: transition carries no information, posterior = marginal at T-1.
  tab.delta_cond_[T] = 0.0;
  tab.tilde_delta_[T] = tab.delta_[T - 1];
  tab.c_eps_[T] = 1.0 - tab.m_[T - 1];
  tab.c_x_[T] = 1.0 - tab.m_[T - 1];
  tab.c_y_[T] = tab.m_[T - 1];
  return tab;
}

inline ScheduleTable build_schedule(const ScheduleParams& params) { return build_schedule_impl(params, 1.0); }

/// Posterior mean with the predicted x0 substituted, element-wise.
inline std::vector<double> posterior_mean(const ScheduleTable& tab, int t, std::span<const double> x_t,
                                          std::span<const double> x0_hat, std::span<const double> y) {
  if (t <= 0 || t > tab.T()) throw IndexError("posterior_mean: t must lie in (0, T]");
  if (x_t.size() != x0_hat.size() || x_t.size() != y.size())
    throw DimensionError("posterior_mean: slices differ in size");
  const double cx = tab.c_x(t), cy = tab.c_y(t), ce = tab.c_eps(t);
  std::vector<double> out(x_t.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = cx * x_t[k] + cy * y[k] - ce * (x_t[k] - x0_hat[k]);
  return out;
}

/// Uniformly spaced decreasing time grid [T, ..., 0] with n_steps transitions.
inline std::vector<int> subsequence(int T, int n_steps) {
  if (T < 1) throw ParameterError("subsequence: T must be positive");
  if (n_steps < 1 || n_steps > T)
    throw ParameterError("subsequence: n_steps must lie in [1, T], got " + std::to_string(n_steps));
  std::vector<int> ts(static_cast<std::size_t>(n_steps) + 1);
  for (int k = 0; k <= n_steps; ++k)
    ts[static_cast<std::size_t>(k)] =
        T - static_cast<int>((static_cast<long long>(k) * T) / n_steps);
  return ts;
}

}  // namespace bbvol
