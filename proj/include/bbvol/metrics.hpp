#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbvol/error.hpp"
#include "bbvol/style_key.hpp"
#include "bbvol/volume.hpp"

namespace bbvol {

inline constexpr double kPsnrCap = 200.0;

struct NrmseResult {
  double value = 0.0;
  bool constant_reference = false;  // normaliser was zero; value is the plain RMSE
};

inline double mse(const Volume& a, const Volume& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t k = 0; k < a.data.size(); ++k) {
    const double d = a.data[k] - b.data[k];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

/// RMSE(a, b) / (max(b) - min(b)); b is the reference.
inline NrmseResult nrmse_detailed(const Volume& a, const Volume& b) {
  const double rmse = std::sqrt(mse(a, b));
  const auto [lo, hi] = std::minmax_element(b.data.begin(), b.data.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return {rmse, true};
  return {rmse / range, false};
}

inline double nrmse(const Volume& a, const Volume& b) { return nrmse_detailed(a, b).value; }

/// 10 log10(1 / MSE) for data range 1, capped at 200 dB.
inline double psnr(const Volume& a, const Volume& b) {
  const double e = mse(a, b);
  if (e < 1e-20) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / e));
}

// ---------------------------------------------------------------------------
// SSIM

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

struct SsimResult {
  double value = 0.0;
  bool fallback = false;  // image smaller than the window: global statistics used
};

namespace detail {

inline std::vector<double> gaussian_kernel(int n, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(n));
  const double c = (n - 1) / 2.0;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    g[static_cast<std::size_t>(i)] = std::exp(-((i - c) * (i - c)) / (2 * sigma * sigma));
    s += g[static_cast<std::size_t>(i)];
  }
  for (double& x : g) x /= s;
  return g;
}

// 'valid' separable filtering of a rows x cols image.
inline std::vector<double> filter_valid(std::span<const double> img, std::size_t rows, std::size_t cols,
                                        std::span<const double> k) {
  const std::size_t n = k.size(), orows = rows - n + 1, ocols = cols - n + 1;
  std::vector<double> tmp(rows * ocols, 0.0), out(orows * ocols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < ocols; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += k[j] * img[r * cols + c + j];
      tmp[r * ocols + c] = s;
    }
  for (std::size_t r = 0; r < orows; ++r)
    for (std::size_t c = 0; c < ocols; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += k[j] * tmp[(r + j) * ocols + c];
      out[r * ocols + c] = s;
    }
  return out;
}

inline double ssim_formula(double mx, double my, double vx, double vy, double cxy, double C1, double C2) {
  return ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
}

}  // namespace detail

/// Mean SSIM map of two images with a Gaussian window over all fully
/// contained window positions (no padding, population covariances).
inline SsimResult ssim_2d(std::span<const double> a, std::span<const double> b, std::size_t rows, std::size_t cols,
                          const SsimParams& p = {}) {
  if (a.size() != rows * cols || b.size() != rows * cols) throw DimensionError("ssim_2d: image size mismatch");
  const double C1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
  const double C2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
  const auto win = static_cast<std::size_t>(p.window);
  if (rows < win || cols < win) {
    const double n = static_cast<double>(a.size());
    double mx = 0, my = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      mx += a[k];
      my += b[k];
    }
    mx /= n;
    my /= n;
    double vx = 0, vy = 0, cxy = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      vx += (a[k] - mx) * (a[k] - mx);
      vy += (b[k] - my) * (b[k] - my);
      cxy += (a[k] - mx) * (b[k] - my);
    }
    return {detail::ssim_formula(mx, my, vx / n, vy / n, cxy / n, C1, C2), true};
  }
  const auto g = detail::gaussian_kernel(p.window, p.sigma);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    aa[k] = a[k] * a[k];
    bb[k] = b[k] * b[k];
    ab[k] = a[k] * b[k];
  }
  const auto mu_a = detail::filter_valid(a, rows, cols, g);
  const auto mu_b = detail::filter_valid(b, rows, cols, g);
  const auto e_aa = detail::filter_valid(aa, rows, cols, g);
  const auto e_bb = detail::filter_valid(bb, rows, cols, g);
  const auto e_ab = detail::filter_valid(ab, rows, cols, g);
  double acc = 0.0;
  for (std::size_t k = 0; k < mu_a.size(); ++k) {
    const double mx = mu_a[k], my = mu_b[k];
    acc += detail::ssim_formula(mx, my, e_aa[k] - mx * mx, e_bb[k] - my * my, e_ab[k] - mx * my, C1, C2);
  }
  return {acc / static_cast<double>(mu_a.size()), false};
}

/// SSIM computed per axial slice and averaged over slices.
inline SsimResult ssim_detailed(const Volume& a, const Volume& b, const SsimParams& p = {}) {
  require_same_shape(a, b, "ssim");
  SsimResult r{0.0, false};
  for (std::size_t z = 0; z < a.Z; ++z) {
    const auto s = ssim_2d(a.slice(z), b.slice(z), a.H, a.W, p);
    r.value += s.value;
    r.fallback = r.fallback || s.fallback;
  }
  r.value /= static_cast<double>(a.Z);
  return r;
}

inline double ssim(const Volume& a, const Volume& b, const SsimParams& p = {}) { return ssim_detailed(a, b, p).value; }

/// Mean SSIM over images cut along `axis` (coronal: y, sagittal: x).
inline double ssim_along(const Volume& a, const Volume& b, Axis axis, const SsimParams& p = {}) {
  require_same_shape(a, b, "ssim_along");
  const auto ia = reslice(a, axis), ib = reslice(b, axis);
  double acc = 0.0;
  for (std::size_t k = 0; k < ia.size(); ++k) acc += ssim_2d(ia[k].data, ib[k].data, ia[k].rows, ia[k].cols, p).value;
  return acc / static_cast<double>(ia.size());
}

// ---------------------------------------------------------------------------
// Slice consistency

struct SliceConsistency {
  double mean_profile_tv = 0.0;   // sum_z |mean(z+1) - mean(z)|
  double adjacent_ssim_term = 0.0; // 1 - mean SSIM(z, z+1)
  double total() const { return mean_profile_tv + adjacent_ssim_term; }
};

inline SliceConsistency slice_consistency_detailed(const Volume& v, const SsimParams& p = {}) {
  if (v.Z < 2) throw ParameterError("slice_consistency: need at least 2 slices");
  std::vector<double> means(v.Z, 0.0);
  for (std::size_t z = 0; z < v.Z; ++z) {
    double s = 0.0;
    for (double x : v.slice(z)) s += x;
    means[z] = s / static_cast<double>(v.slice_size());
  }
  SliceConsistency r;
  double ss = 0.0;
  for (std::size_t z = 0; z + 1 < v.Z; ++z) {
    r.mean_profile_tv += std::abs(means[z + 1] - means[z]);
    ss += ssim_2d(v.slice(z), v.slice(z + 1), v.H, v.W, p).value;
  }
  r.adjacent_ssim_term = 1.0 - ss / static_cast<double>(v.Z - 1);
  return r;
}

inline double slice_consistency(const Volume& v) { return slice_consistency_detailed(v).total(); }

// ---------------------------------------------------------------------------
// Report

inline constexpr int kEvalReportVersion = 1;

struct EvalReport {
  double nrmse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double ssim_coronal = 0.0;
  double ssim_sagittal = 0.0;
  double slice_consistency = 0.0;       // of the prediction
  double mean_profile_tv = 0.0;         // its first term
  double slice_consistency_reference = 0.0;
  double histogram_w1 = 0.0;            // prediction histogram vs style key
  bool nrmse_constant_reference = false;
  bool ssim_fallback = false;
  std::string config_hash;

  bool operator==(const EvalReport&) const = default;
};

/// All metrics of pred against target. The histogram distance uses `style`
/// when given, else the target's own key.
inline EvalReport evaluate(const Volume& pred, const Volume& target, const std::optional<StyleKey>& style = std::nullopt) {
  require_same_shape(pred, target, "evaluate");
  EvalReport r;
  const auto nr = nrmse_detailed(pred, target);
  r.nrmse = nr.value;
  r.nrmse_constant_reference = nr.constant_reference;
  r.psnr = psnr(pred, target);
  const auto s = ssim_detailed(pred, target);
  r.ssim = s.value;
  r.ssim_fallback = s.fallback;
  r.ssim_coronal = ssim_along(pred, target, Axis::y);
  r.ssim_sagittal = ssim_along(pred, target, Axis::x);
  if (pred.Z >= 2) {
    const auto sc = slice_consistency_detailed(pred);
    r.slice_consistency = sc.total();
    r.mean_profile_tv = sc.mean_profile_tv;
    r.slice_consistency_reference = slice_consistency(target);
  }
  const StyleKey ref = style ? *style : compute_style_key(target);
  r.histogram_w1 = histogram_distance(compute_style_key(pred, ref.bins), ref);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"schema", "bbvol.eval_report"},
          {"version", kEvalReportVersion},
          {"definitions",
           {{"nrmse", "rmse / (max(reference) - min(reference))"},
            {"psnr", "10 log10(1 / mse), data range 1, capped at 200 dB"},
            {"ssim", "2D per axial slice, gaussian 11x11 sigma 1.5, k1 0.01, k2 0.03, valid windows, mean over slices"},
            {"slice_consistency", "sum_z |mean_z+1 - mean_z| + (1 - mean adjacent axial SSIM)"},
            {"histogram_w1", "W1 between prediction histogram and style key on [0,1]"}}},
          {"nrmse", r.nrmse},
          {"psnr", r.psnr},
          {"ssim", r.ssim},
          {"ssim_coronal", r.ssim_coronal},
          {"ssim_sagittal", r.ssim_sagittal},
          {"slice_consistency", r.slice_consistency},
          {"mean_profile_tv", r.mean_profile_tv},
          {"slice_consistency_reference", r.slice_consistency_reference},
          {"histogram_w1", r.histogram_w1},
          {"flags", {{"nrmse_constant_reference", r.nrmse_constant_reference}, {"ssim_fallback", r.ssim_fallback}}},
          {"config_hash", r.config_hash}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "bbvol.eval_report") throw FormatError("eval report: wrong schema tag", 0);
  if (j.value("version", 0) != kEvalReportVersion) throw FormatError("eval report: unsupported version", 0);
  EvalReport r;
  r.nrmse = j.at("nrmse").get<double>();
  r.psnr = j.at("psnr").get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.ssim_coronal = j.at("ssim_coronal").get<double>();
  r.ssim_sagittal = j.at("ssim_sagittal").get<double>();
  r.slice_consistency = j.at("slice_consistency").get<double>();
  r.mean_profile_tv = j.at("mean_profile_tv").get<double>();
  r.slice_consistency_reference = j.at("slice_consistency_reference").get<double>();
  r.histogram_w1 = j.at("histogram_w1").get<double>();
  r.nrmse_constant_reference = j.at("flags").at("nrmse_constant_reference").get<bool>();
  r.ssim_fallback = j.at("flags").at("ssim_fallback").get<bool>();
  r.config_hash = j.at("config_hash").get<std::string>();
  return r;
}

}  // namespace bbvol
