#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbvol/error.hpp"
#include "bbvol/volume.hpp"

namespace bbvol {

inline constexpr int kDefaultBins = 128;

/// Histogram triple of a target volume: probability mass, cumulative mass and
/// backward difference of the mass (diff[0] = hist[0]).
struct StyleKey {
  int bins = 0;
  std::vector<double> hist, cum, diff;

  // [hist | cum | diff], the layout fed to the estimator.
  std::vector<double> flatten() const {
    std::vector<double> v;
    v.reserve(3 * static_cast<std::size_t>(bins));
    v.insert(v.end(), hist.begin(), hist.end());
    v.insert(v.end(), cum.begin(), cum.end());
    v.insert(v.end(), diff.begin(), diff.end());
    return v;
  }

  bool operator==(const StyleKey&) const = default;
};

// Fills cum and diff from hist.
inline StyleKey style_key_from_hist(std::vector<double> hist) {
  StyleKey k;
  k.bins = static_cast<int>(hist.size());
  k.hist = std::move(hist);
  k.cum.resize(k.hist.size());
  k.diff.resize(k.hist.size());
  double acc = 0.0;
  for (std::size_t b = 0; b < k.hist.size(); ++b) {
    acc += k.hist[b];
    k.cum[b] = acc;
    k.diff[b] = b == 0 ? k.hist[0] : k.hist[b] - k.hist[b - 1];
  }
  return k;
}

/// Bin b covers [b/B, (b+1)/B); the last bin is closed. Values outside
/// [0, 1] are clamped into the end bins.
inline StyleKey compute_style_key(const Volume& v, int B = kDefaultBins) {
  if (B < 2) throw ParameterError("compute_style_key: B must be >= 2");
  if (v.data.empty()) throw DimensionError("compute_style_key: empty volume");
  std::vector<std::size_t> counts(static_cast<std::size_t>(B), 0);
  for (double x : v.data) {
    const double c = std::clamp(x, 0.0, 1.0);
    const auto b = std::min<std::size_t>(static_cast<std::size_t>(B) - 1, static_cast<std::size_t>(c * B));
    ++counts[b];
  }
  std::vector<double> hist(counts.size());
  const double n = static_cast<double>(v.data.size());
  for (std::size_t b = 0; b < counts.size(); ++b) hist[b] = static_cast<double>(counts[b]) / n;
  return style_key_from_hist(std::move(hist));
}

/// Element-wise mean of the masses (summed in list order), then cum/diff rebuilt.
inline StyleKey average_style_keys(std::span<const StyleKey> keys) {
  if (keys.empty()) throw ParameterError("average_style_keys: empty list");
  const int B = keys[0].bins;
  std::vector<double> hist(static_cast<std::size_t>(B), 0.0);
  for (const auto& k : keys) {
    if (k.bins != B || k.hist.size() != hist.size()) throw ParameterError("average_style_keys: mixed bin counts");
    for (std::size_t b = 0; b < hist.size(); ++b) hist[b] += k.hist[b];
  }
  const double n = static_cast<double>(keys.size());
  for (double& h : hist) h /= n;
  return style_key_from_hist(std::move(hist));
}

/// Wasserstein-1 distance between the two mass functions on [0, 1].
inline double histogram_distance(const StyleKey& a, const StyleKey& b) {
  if (a.bins != b.bins) throw ParameterError("histogram_distance: mixed bin counts");
  // Recomputed from hist so that the distance depends on the masses alone.
  double ca = 0.0, cb = 0.0, acc = 0.0;
  for (std::size_t k = 0; k < a.hist.size(); ++k) {
    ca += a.hist[k];
    cb += b.hist[k];
    acc += std::abs(ca - cb);
  }
  return acc / a.bins;
}

// JSON: {"bins": B, "hist": [...], "cum": [...], "diff": [...]}

inline nlohmann::json to_json(const StyleKey& k) {
  return {{"bins", k.bins}, {"hist", k.hist}, {"cum", k.cum}, {"diff", k.diff}};
}

inline StyleKey style_key_from_json(const nlohmann::json& j) {
  StyleKey k;
  try {
    k.bins = j.at("bins").get<int>();
    k.hist = j.at("hist").get<std::vector<double>>();
    k.cum = j.at("cum").get<std::vector<double>>();
    k.diff = j.at("diff").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("style key json: ") + e.what(), 0);
  }
  const auto B = static_cast<std::size_t>(k.bins);
  if (k.bins < 2 || k.hist.size() != B || k.cum.size() != B || k.diff.size() != B)
    throw FormatError("style key json: array lengths do not match bins", 0);
  return k;
}

inline void save_style_key(const StyleKey& k, const std::filesystem::path& path) {
  const std::string s = to_json(k).dump(1);
  write_file_bytes(path, std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

inline StyleKey load_style_key(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw FormatError("style key: invalid JSON in '" + path.string() + "'", 0);
  return style_key_from_json(j);
}

}  // namespace bbvol
