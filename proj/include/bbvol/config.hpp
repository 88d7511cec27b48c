#pragma once

#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "bbvol/error.hpp"
#include "bbvol/estimator.hpp"
#include "bbvol/phantom.hpp"
#include "bbvol/rng.hpp"
#include "bbvol/sampler.hpp"
#include "bbvol/schedule.hpp"
#include "bbvol/unet.hpp"

namespace bbvol {

/// Everything an experiment needs, with a default for every field.
///
///   {
///     "schedule": {"T": 1000, "s": 1.0},
///     "data":   {"manifest": "", "n": 20, "style_seed": 7, "bins": 128,
///                "phantom": {"size": [32,32,32], "n_shells": 3, "noise_sigma": 0.02, "seed": 42,
///                            "style": {"gamma": 1, "contrast": 1, "offset": 0}}},
///     "train":  {"batch_size": 16, "iterations": 1000, "lr": 1e-4, "lr_final": -1, "seed": 0,
///                "weighted_loss": false, "half_width": 1, "base_width": 32, "levels": 3,
///                "groups": 8, "emb_dim": 128, "use_style_key": true, "parametrization": "x0"},
///     "sample": {"n_steps": 100, "ista": false, "M": 0, "lambda": 0.5, "correction_norm": "volume",
///                "threads": 1},
///     "eval":   {"out_dir": "out"}
///   }
struct ExperimentConfig {
  ScheduleParams schedule;

  std::string manifest;
  std::size_t n_pairs = 20;
  std::uint64_t style_seed = 7;
  int bins = kDefaultBins;
  PhantomConfig phantom;

  TrainingConfig train;
  std::size_t half_width = 1;
  int base_width = 32;
  int levels = 3;
  int groups = 8;
  int emb_dim = 128;
  bool use_style_key = true;
  Parametrization parametrization = Parametrization::x0;

  SamplerConfig sample;

  std::string out_dir = "out";

  UNetArch arch() const {
    auto a = TrainableEstimator::default_arch(half_width, bins, use_style_key);
    a.base_width = base_width;
    a.levels = levels;
    a.groups = groups;
    a.emb_dim = emb_dim;
    return a;
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ParameterError("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ParameterError("config: unknown key '" + where + (where.empty() ? "" : ".") + k + "'");
}

template <class V>
void read(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {
      {"schedule", {{"T", c.schedule.T}, {"s", c.schedule.s}}},
      {"data",
       {{"manifest", c.manifest},
        {"n", c.n_pairs},
        {"style_seed", c.style_seed},
        {"bins", c.bins},
        {"phantom",
         {{"size", {c.phantom.Z, c.phantom.H, c.phantom.W}},
          {"n_shells", c.phantom.n_shells},
          {"noise_sigma", c.phantom.noise_sigma},
          {"seed", c.phantom.seed},
          {"style", {{"gamma", c.phantom.style.gamma}, {"contrast", c.phantom.style.contrast}, {"offset", c.phantom.style.offset}}}}}}},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"iterations", c.train.iterations},
        {"lr", c.train.lr},
        {"lr_final", c.train.lr_final},
        {"seed", c.train.seed},
        {"weighted_loss", c.train.weighted_loss},
        {"half_width", c.half_width},
        {"base_width", c.base_width},
        {"levels", c.levels},
        {"groups", c.groups},
        {"emb_dim", c.emb_dim},
        {"use_style_key", c.use_style_key},
        {"parametrization", to_string(c.parametrization)}}},
      {"sample",
       {{"n_steps", c.sample.n_steps},
        {"ista", c.sample.ista},
        {"M", c.sample.M},
        {"lambda", c.sample.lambda},
        {"correction_norm", to_string(c.sample.norm)},
        {"threads", c.sample.threads}}},
      {"eval", {{"out_dir", c.out_dir}}}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::reject_unknown;
  ExperimentConfig c;
  reject_unknown(j, {"schedule", "data", "train", "sample", "eval"}, "");
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    reject_unknown(s, {"T", "s"}, "schedule");
    read(s, "T", c.schedule.T);
    read(s, "s", c.schedule.s);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, {"manifest", "n", "style_seed", "bins", "phantom"}, "data");
    read(d, "manifest", c.manifest);
    read(d, "n", c.n_pairs);
    read(d, "style_seed", c.style_seed);
    read(d, "bins", c.bins);
    if (d.contains("phantom")) {
      const auto& p = d["phantom"];
      reject_unknown(p, {"size", "n_shells", "noise_sigma", "seed", "style"}, "data.phantom");
      if (p.contains("size")) {
        std::vector<std::size_t> sz;
        read(p, "size", sz);
        if (sz.size() != 3) throw ParameterError("config: data.phantom.size must have 3 entries");
        c.phantom.Z = sz[0];
        c.phantom.H = sz[1];
        c.phantom.W = sz[2];
      }
      read(p, "n_shells", c.phantom.n_shells);
      read(p, "noise_sigma", c.phantom.noise_sigma);
      read(p, "seed", c.phantom.seed);
      if (p.contains("style")) {
        const auto& st = p["style"];
        reject_unknown(st, {"gamma", "contrast", "offset"}, "data.phantom.style");
        read(st, "gamma", c.phantom.style.gamma);
        read(st, "contrast", c.phantom.style.contrast);
        read(st, "offset", c.phantom.style.offset);
      }
    }
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t,
                   {"batch_size", "iterations", "lr", "lr_final", "seed", "weighted_loss", "half_width", "base_width",
                    "levels", "groups", "emb_dim", "use_style_key", "parametrization"},
                   "train");
    read(t, "batch_size", c.train.batch_size);
    read(t, "iterations", c.train.iterations);
    read(t, "lr", c.train.lr);
    read(t, "lr_final", c.train.lr_final);
    read(t, "seed", c.train.seed);
    read(t, "weighted_loss", c.train.weighted_loss);
    read(t, "half_width", c.half_width);
    read(t, "base_width", c.base_width);
    read(t, "levels", c.levels);
    read(t, "groups", c.groups);
    read(t, "emb_dim", c.emb_dim);
    read(t, "use_style_key", c.use_style_key);
    if (t.contains("parametrization")) {
      std::string v;
      read(t, "parametrization", v);
      c.parametrization = parse_parametrization(v);
    }
  }
  if (j.contains("sample")) {
    const auto& s = j["sample"];
    reject_unknown(s, {"n_steps", "ista", "M", "lambda", "correction_norm", "threads"}, "sample");
    read(s, "n_steps", c.sample.n_steps);
    read(s, "ista", c.sample.ista);
    read(s, "M", c.sample.M);
    read(s, "lambda", c.sample.lambda);
    read(s, "threads", c.sample.threads);
    if (s.contains("correction_norm")) {
      std::string n;
      read(s, "correction_norm", n);
      c.sample.norm = parse_correction_norm(n);
    }
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    reject_unknown(e, {"out_dir"}, "eval");
    read(e, "out_dir", c.out_dir);
  }
  c.schedule.validate();
  c.train.validate();
  c.sample.validate(c.schedule.T);
  c.arch().validate();
  if (c.bins < 2) throw ParameterError("config: data.bins must be >= 2");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw FormatError("config: invalid JSON in '" + path.string() + "'", 0);
  return experiment_config_from_json(j);
}

/// FNV-1a of the canonical (fully defaulted, key-sorted) JSON form. The
/// worker count does not change results and is left out.
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j["sample"].erase("threads");
  return hex64(fnv1a(j.dump()));
}

}  // namespace bbvol
