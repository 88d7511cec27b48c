#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbvol/error.hpp"
#include "bbvol/estimator.hpp"
#include "bbvol/phantom.hpp"
#include "bbvol/rng.hpp"
#include "bbvol/style_key.hpp"
#include "bbvol/volume.hpp"

namespace bbvol {

// Dataset manifest: JSON listing every pair's RVOL files (relative to the
// manifest directory), geometry seed, style parameters and payload checksums.
//
//   {"schema": "bbvol.manifest", "version": 1, "config_hash": "...",
//    "style_seed": 7, "bins": 128,
//    "phantom": {"size": [Z,H,W], "n_shells": 3, "noise_sigma": 0.02, "base_seed": 42},
//    "pairs": [{"index": 0, "seed": 42, "style": {"gamma":..,"contrast":..,"offset":..},
//               "source": "pair_000_source.rvol", "target": "pair_000_target.rvol",
//               "source_checksum": "..", "target_checksum": ".."}, ...]}

struct ManifestEntry {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  StyleParams style;
  std::string source, target;
  std::string source_checksum, target_checksum;
};

struct Manifest {
  std::string config_hash;
  std::uint64_t style_seed = 0;
  int bins = kDefaultBins;
  PhantomConfig base;
  std::vector<ManifestEntry> pairs;
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& e : m.pairs)
    pairs.push_back({{"index", e.index},
                     {"seed", e.seed},
                     {"style", {{"gamma", e.style.gamma}, {"contrast", e.style.contrast}, {"offset", e.style.offset}}},
                     {"source", e.source},
                     {"target", e.target},
                     {"source_checksum", e.source_checksum},
                     {"target_checksum", e.target_checksum}});
  return {{"schema", "bbvol.manifest"},
          {"version", 1},
          {"config_hash", m.config_hash},
          {"style_seed", m.style_seed},
          {"bins", m.bins},
          {"phantom",
           {{"size", {m.base.Z, m.base.H, m.base.W}},
            {"n_shells", m.base.n_shells},
            {"noise_sigma", m.base.noise_sigma},
            {"base_seed", m.base.seed}}},
          {"pairs", pairs}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "bbvol.manifest") throw FormatError("manifest: wrong schema tag", 0);
  Manifest m;
  try {
    m.config_hash = j.at("config_hash").get<std::string>();
    m.style_seed = j.at("style_seed").get<std::uint64_t>();
    m.bins = j.at("bins").get<int>();
    const auto& p = j.at("phantom");
    const auto sz = p.at("size").get<std::vector<std::size_t>>();
    if (sz.size() != 3) throw FormatError("manifest: phantom.size must have 3 entries", 0);
    m.base.Z = sz[0];
    m.base.H = sz[1];
    m.base.W = sz[2];
    m.base.n_shells = p.at("n_shells").get<int>();
    m.base.noise_sigma = p.at("noise_sigma").get<double>();
    m.base.seed = p.at("base_seed").get<std::uint64_t>();
    for (const auto& e : j.at("pairs")) {
      ManifestEntry me;
      me.index = e.at("index").get<std::size_t>();
      me.seed = e.at("seed").get<std::uint64_t>();
      me.style = {e.at("style").at("gamma").get<double>(), e.at("style").at("contrast").get<double>(),
                  e.at("style").at("offset").get<double>()};
      me.source = e.at("source").get<std::string>();
      me.target = e.at("target").get<std::string>();
      me.source_checksum = e.at("source_checksum").get<std::string>();
      me.target_checksum = e.at("target_checksum").get<std::string>();
      m.pairs.push_back(std::move(me));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what(), 0);
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw FormatError("manifest: invalid JSON in '" + path.string() + "'", 0);
  return manifest_from_json(j);
}

/// Writes every pair as RVOL plus manifest.json into dir. Returns the manifest.
inline Manifest write_dataset(const std::vector<DatasetEntry>& data, const PhantomConfig& base, std::uint64_t style_seed,
                              int bins, const std::string& config_hash, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.config_hash = config_hash;
  m.style_seed = style_seed;
  m.bins = bins;
  m.base = base;
  for (std::size_t j = 0; j < data.size(); ++j) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair_%03zu", j);
    ManifestEntry e;
    e.index = j;
    e.seed = data[j].config.seed;
    e.style = data[j].config.style;
    e.source = std::string(stem) + "_source.rvol";
    e.target = std::string(stem) + "_target.rvol";
    e.source_checksum = hex64(float32_checksum(data[j].pair.source.data));
    e.target_checksum = hex64(float32_checksum(data[j].pair.target.data));
    save_volume(data[j].pair.source, dir / e.source);
    save_volume(data[j].pair.target, dir / e.target);
    m.pairs.push_back(std::move(e));
  }
  const std::string js = to_json(m).dump(1) + "\n";
  write_file_bytes(dir / "manifest.json", std::span(reinterpret_cast<const unsigned char*>(js.data()), js.size()));
  return m;
}

/// Loads every pair listed in the manifest and verifies its checksums.
inline std::vector<TrainingPair> load_training_pairs(const std::filesystem::path& manifest_path, int bins) {
  const auto m = load_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  std::vector<TrainingPair> out;
  for (const auto& e : m.pairs) {
    PhantomPair p{load_volume(dir / e.source), load_volume(dir / e.target)};
    if (hex64(float32_checksum(p.source.data)) != e.source_checksum)
      throw FormatError("manifest: checksum mismatch for " + e.source, 0);
    if (hex64(float32_checksum(p.target.data)) != e.target_checksum)
      throw FormatError("manifest: checksum mismatch for " + e.target, 0);
    p.source.id = p.target.id = mix_seed(e.seed);
    out.push_back(make_training_pair(p, bins));
  }
  if (out.empty()) throw FormatError("manifest: no pairs", 0);
  return out;
}

}  // namespace bbvol
