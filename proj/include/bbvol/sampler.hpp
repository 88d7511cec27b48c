#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "bbvol/error.hpp"
#include "bbvol/estimator.hpp"
#include "bbvol/schedule.hpp"
#include "bbvol/style_key.hpp"
#include "bbvol/volume.hpp"

namespace bbvol {

/// Runs fn(k) for k in [0, n) on up to `threads` workers with a static
/// interleaved assignment. Callers write results into per-index slots, so the
/// outcome does not depend on the worker count.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < n; k += workers) fn(k);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Element-wise bridge maps

/// x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) noise
inline Volume forward_sample(const Volume& x0, const Volume& y, int t, const Volume& noise, const ScheduleTable& tab) {
  require_same_shape(x0, y, "forward_sample");
  require_same_shape(x0, noise, "forward_sample");
  const double m = tab.m(t), sd = std::sqrt(tab.delta(t));
  Volume out(x0.Z, x0.H, x0.W);
  out.id = y.id;
  for (std::size_t k = 0; k < out.data.size(); ++k)
    out.data[k] = (1 - m) * x0.data[k] + m * y.data[k] + sd * noise.data[k];
  return out;
}

/// Deterministic jump t -> t_next. With x0_hat = x_t - eps_hat:
///   x_next = (1 - m') x0_hat + m' y + sqrt(delta'/delta) (x_t - (1 - m) x0_hat - m y)
/// The last term is dropped when delta_t = 0.
inline Volume reverse_step(const Volume& x_t, const Volume& eps_hat, const Volume& y, int t, int t_next,
                           const ScheduleTable& tab) {
  if (t_next >= t) throw ParameterError("reverse_step: t_next must be smaller than t");
  if (t_next < 0) throw ParameterError("reverse_step: t_next must be >= 0");
  require_same_shape(x_t, eps_hat, "reverse_step");
  require_same_shape(x_t, y, "reverse_step");
  const double m = tab.m(t), mn = tab.m(t_next), d = tab.delta(t), dn = tab.delta(t_next);
  const double ratio = d > 0.0 ? std::sqrt(dn / d) : 0.0;
  Volume out(x_t.Z, x_t.H, x_t.W);
  out.id = x_t.id;
  for (std::size_t k = 0; k < out.data.size(); ++k) {
    const double x0h = x_t.data[k] - eps_hat.data[k];
    const double resid = x_t.data[k] - (1 - m) * x0h - m * y.data[k];
    out.data[k] = (1 - mn) * x0h + mn * y.data[k] + ratio * resid;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Co-prediction and score

/// Averages, for every slice i, the predictions of all windows whose centre
/// lies in [i - N, i + N] (clipped to the volume). Summation runs over window
/// centres in ascending order.
inline Volume co_predict(const Volume& X_t, const Volume& Y, const StyleKey& key, int t, const NoiseEstimator& est,
                         int threads = 1) {
  require_same_shape(X_t, Y, "co_predict");
  const std::size_t Z = X_t.Z, N = est.half_width(), hw = X_t.slice_size();
  std::vector<Volume> windows(Z);
  parallel_for(Z, threads, [&](std::size_t c) {
    windows[c] = predict_with_sourcecond(est, extract_subvolume(X_t, c, N), extract_subvolume(Y, c, N), key, t);
  });
  Volume E(Z, X_t.H, X_t.W);
  E.id = X_t.id;
  for (std::size_t i = 0; i < Z; ++i) {
    const std::size_t lo = i >= N ? i - N : 0, hi = std::min(Z - 1, i + N);
    auto dst = E.slice(i);
    for (std::size_t c = lo; c <= hi; ++c) {
      const auto src = windows[c].slice(i + N - c);
      for (std::size_t k = 0; k < hw; ++k) dst[k] += src[k];
    }
    const double inv = 1.0 / static_cast<double>(hi - lo + 1);
    for (double& v : dst) v *= inv;
  }
  return E;
}

/// Centre-row prediction for every slice (no aggregation across windows).
inline Volume center_predict(const Volume& X_t, const Volume& Y, const StyleKey& key, int t, const NoiseEstimator& est,
                             int threads = 1) {
  require_same_shape(X_t, Y, "center_predict");
  const std::size_t N = est.half_width();
  Volume E(X_t.Z, X_t.H, X_t.W);
  E.id = X_t.id;
  parallel_for(X_t.Z, threads, [&](std::size_t i) {
    const auto p = predict_with_sourcecond(est, extract_subvolume(X_t, i, N), extract_subvolume(Y, i, N), key, t);
    const auto row = p.slice(N);
    std::copy(row.begin(), row.end(), E.slice(i).begin());
  });
  return E;
}

/// S = -(m_t (X_t - Y) + (1 - m_t) E) / delta_t for a given co-prediction E.
inline Volume score_from_prediction(const Volume& X_t, const Volume& Y, const Volume& E, int t, const ScheduleTable& tab) {
  const double d = tab.delta(t);
  if (!(d > 0.0)) throw DomainError("score: delta_t = 0 at t=" + std::to_string(t));
  require_same_shape(X_t, Y, "score");
  require_same_shape(X_t, E, "score");
  const double m = tab.m(t);
  Volume S(X_t.Z, X_t.H, X_t.W);
  for (std::size_t k = 0; k < S.data.size(); ++k) S.data[k] = -(m * (X_t.data[k] - Y.data[k]) + (1 - m) * E.data[k]) / d;
  return S;
}

inline Volume score(const Volume& X_t, const Volume& Y, const StyleKey& key, int t, const NoiseEstimator& est,
                    const ScheduleTable& tab, int threads = 1) {
  if (!(tab.delta(t) > 0.0)) throw DomainError("score: delta_t = 0 at t=" + std::to_string(t));
  return score_from_prediction(X_t, Y, co_predict(X_t, Y, key, t, est, threads), t, tab);
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

struct CorrectionTrace {
  std::vector<double> score_norms;    // volume-level ||S|| per iteration
  std::vector<double> step_norms;     // volume-level ||X_m - X_{m-1}|| per iteration
};

enum class CorrectionNorm {
  slice,   // ||S|| per slice, one weight per slice
  volume,  // ||S|| over the whole volume, one weight for all slices
};

inline const char* to_string(CorrectionNorm n) { return n == CorrectionNorm::slice ? "slice" : "volume"; }

inline CorrectionNorm parse_correction_norm(const std::string& s) {
  if (s == "slice") return CorrectionNorm::slice;
  if (s == "volume") return CorrectionNorm::volume;
  throw ParameterError("unknown correction norm '" + s + "' (expected slice or volume)");
}

/// M deterministic corrector iterations
///   X_m = X_{m-1} + lambda * delta_cond_t * (d / ||S||^2) * S,   d = H * W
/// with ||S|| taken per slice or over the volume. Slices (or volumes) whose
/// score norm is below 1e-12 are left in place.
inline Volume correct(const Volume& X_bar, const Volume& Y, const StyleKey& key, int t, double lambda, int M,
                      const NoiseEstimator& est, const ScheduleTable& tab, CorrectionNorm norm = CorrectionNorm::volume,
                      int threads = 1, CorrectionTrace* trace = nullptr) {
  if (M < 0) throw ParameterError("correct: M must be >= 0");
  if (!(lambda > 0.0)) throw ParameterError("correct: lambda must be > 0");
  Volume X = X_bar;
  if (M == 0) return X;
  if (!(tab.delta(t) > 0.0)) throw DomainError("correct: delta_t = 0 at t=" + std::to_string(t));
  const double dc = tab.delta_cond(t);
  const double d = static_cast<double>(X.slice_size());
  for (int it = 0; it < M; ++it) {
    const Volume S = score(X, Y, key, t, est, tab, threads);
    const double vol_norm = l2_norm(S.data);
    double moved = 0.0;
    for (std::size_t z = 0; z < X.Z; ++z) {
      const auto s = S.slice(z);
      const double nrm = norm == CorrectionNorm::slice ? l2_norm(s) : vol_norm;
      if (nrm < 1e-12) continue;
      const double w = lambda * dc * d / (nrm * nrm);
      auto x = X.slice(z);
      for (std::size_t k = 0; k < x.size(); ++k) {
        x[k] += w * s[k];
        moved += (w * s[k]) * (w * s[k]);
      }
    }
    if (trace) {
      trace->score_norms.push_back(vol_norm);
      trace->step_norms.push_back(std::sqrt(moved));
    }
  }
  return X;
}

// ---------------------------------------------------------------------------
// Volume samplers

struct SamplerConfig {
  int n_steps = 100;
  bool ista = false;
  int M = 0;
  double lambda = 0.5;
  CorrectionNorm norm = CorrectionNorm::volume;
  int threads = 1;
  std::uint64_t seed = 0;  // unused: every path is deterministic

  void validate(int T) const {
    if (n_steps < 1 || n_steps > T) throw ParameterError("sampler: n_steps must lie in [1, T]");
    if (M < 0) throw ParameterError("sampler: M must be >= 0");
    if (!(lambda > 0.0)) throw ParameterError("sampler: lambda must be > 0");
  }

  static SamplerConfig naive(int steps = 100) { return {steps, false, 0}; }
  static SamplerConfig ista_default() { return {50, true, 1}; }
  static SamplerConfig cp_only(int steps = 100) { return {steps, true, 0}; }
};

struct StepDiagnostics {
  int t = 0, t_next = 0;
  double prediction_norm = 0.0;
  std::vector<double> score_norms;
  std::vector<double> correction_norms;
};

struct SampleResult {
  Volume x0_hat;
  std::vector<StepDiagnostics> steps;
};

inline nlohmann::json to_json(const SampleResult& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"t", s.t},
                     {"t_next", s.t_next},
                     {"prediction_norm", s.prediction_norm},
                     {"score_norms", s.score_norms},
                     {"correction_norms", s.correction_norms}});
  return {{"steps", steps}};
}

namespace detail {

inline void require_finite(const Volume& v, int t) {
  for (double x : v.data)
    if (!std::isfinite(x)) throw DomainError("sampler: non-finite latent at t=" + std::to_string(t));
}

}  // namespace detail

/// Co-prediction + reverse step + (optional) deterministic correction, from X_T = Y.
inline SampleResult ista_sample(const Volume& Y, const StyleKey& key, const SamplerConfig& cfg, const NoiseEstimator& est,
                                const ScheduleTable& tab) {
  cfg.validate(tab.T());
  const auto ts = subsequence(tab.T(), cfg.n_steps);
  SampleResult res;
  Volume X = Y;
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const int t = ts[k], tn = ts[k + 1];
    StepDiagnostics diag{t, tn, 0.0, {}, {}};
    const Volume E = co_predict(X, Y, key, t, est, cfg.threads);
    diag.prediction_norm = l2_norm(E.data);
    X = reverse_step(X, E, Y, t, tn, tab);
    if (cfg.M > 0 && tn != 0 && tn != tab.T()) {
      CorrectionTrace tr;
      X = correct(X, Y, key, tn, cfg.lambda, cfg.M, est, tab, cfg.norm, cfg.threads, &tr);
      diag.score_norms = std::move(tr.score_norms);
      diag.correction_norms = std::move(tr.step_norms);
    }
    detail::require_finite(X, tn);
    res.steps.push_back(std::move(diag));
  }
  res.x0_hat = std::move(X);
  return res;
}

/// Every slice follows its own centred-window prediction; no aggregation, no correction.
inline SampleResult naive_sample(const Volume& Y, const StyleKey& key, const SamplerConfig& cfg,
                                 const NoiseEstimator& est, const ScheduleTable& tab) {
  cfg.validate(tab.T());
  const auto ts = subsequence(tab.T(), cfg.n_steps);
  SampleResult res;
  Volume X = Y;
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const int t = ts[k], tn = ts[k + 1];
    const Volume E = center_predict(X, Y, key, t, est, cfg.threads);
    X = reverse_step(X, E, Y, t, tn, tab);
    detail::require_finite(X, tn);
    res.steps.push_back({t, tn, l2_norm(E.data), {}, {}});
  }
  res.x0_hat = std::move(X);
  return res;
}

inline SampleResult sample(const Volume& Y, const StyleKey& key, const SamplerConfig& cfg, const NoiseEstimator& est,
                           const ScheduleTable& tab) {
  return cfg.ista ? ista_sample(Y, key, cfg, est, tab) : naive_sample(Y, key, cfg, est, tab);
}

}  // namespace bbvol
