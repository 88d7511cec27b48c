#pragma once

// Command-line front end. Kept in a header so tests can drive it in-process.

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bbvol/config.hpp"
#include "bbvol/error.hpp"
#include "bbvol/estimator.hpp"
#include "bbvol/manifest.hpp"
#include "bbvol/metrics.hpp"
#include "bbvol/phantom.hpp"
#include "bbvol/sampler.hpp"
#include "bbvol/schedule.hpp"
#include "bbvol/style_key.hpp"
#include "bbvol/verify.hpp"
#include "bbvol/volume.hpp"

namespace bbvol::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kVerify = 4 };

namespace detail {

namespace fs = std::filesystem;

inline void write_json(const nlohmann::json& j, const fs::path& path) {
  const std::string s = j.dump(1) + "\n";
  write_file_bytes(path, std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

inline nlohmann::json read_json(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw FormatError("invalid JSON in '" + path.string() + "'", 0);
  return j;
}

inline ExperimentConfig load_config_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_experiment_config(path);
}

inline void banner(std::ostream& out, const std::string& cmd, const std::string& hash, std::uint64_t seed) {
  out << cmd << ": config_hash=" << hash << " seed=" << seed << "\n";
}

inline bool is_rvol(const std::string& p) { return fs::path(p).extension() == ".rvol"; }

/// "avg" (needs a checkpoint descriptor), a key JSON file, or a reference RVOL volume.
inline StyleKey resolve_style_key(const std::string& spec, int bins, const nlohmann::json* descriptor) {
  if (spec == "avg") {
    if (!descriptor || !descriptor->contains("avg_key"))
      throw LookupError("style key 'avg' requested but the checkpoint carries no averaged key");
    return style_key_from_json(descriptor->at("avg_key"));
  }
  if (is_rvol(spec)) return compute_style_key(load_volume(spec), bins);
  return load_style_key(spec);
}

inline bool dir_has_entries(const fs::path& p) { return fs::exists(p) && !fs::is_empty(p); }

// ---------------------------------------------------------------------------

struct GenOpts {
  std::string config, out;
  std::optional<std::size_t> n;
  bool force = false;
};

inline int gen_phantoms(const GenOpts& o, std::ostream& out) {
  auto cfg = load_config_or_default(o.config);
  if (o.n) cfg.n_pairs = *o.n;
  if (cfg.n_pairs == 0) throw ParameterError("gen-phantoms: n must be >= 1");
  if (dir_has_entries(o.out) && !o.force)
    throw ParameterError("gen-phantoms: output directory '" + o.out + "' is not empty (use --force to overwrite)");
  const auto hash = config_hash(cfg);
  banner(out, "gen-phantoms", hash, cfg.phantom.seed);
  const auto data = generate_dataset(cfg.n_pairs, cfg.phantom, cfg.style_seed);
  write_dataset(data, cfg.phantom, cfg.style_seed, cfg.bins, hash, o.out);
  const auto bytes = read_file_bytes(fs::path(o.out) / "manifest.json");
  out << "wrote " << data.size() << " pairs to " << o.out << "\n";
  out << "manifest_checksum=" << hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())))
      << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainOpts {
  std::string config, manifest, out, loss_curve;
  std::optional<int> iterations;
  int log_every = 100;
};

inline int train(const TrainOpts& o, std::ostream& out) {
  auto cfg = load_config_or_default(o.config);
  if (!o.manifest.empty()) cfg.manifest = o.manifest;
  if (o.iterations) cfg.train.iterations = *o.iterations;
  cfg.train.validate();
  const auto hash = config_hash(cfg);
  banner(out, "train", hash, cfg.train.seed);

  std::vector<TrainingPair> pairs;
  if (!cfg.manifest.empty()) {
    pairs = load_training_pairs(cfg.manifest, cfg.bins);
  } else {
    for (const auto& e : generate_dataset(cfg.n_pairs, cfg.phantom, cfg.style_seed))
      pairs.push_back(make_training_pair(e.pair, cfg.bins));
  }
  std::vector<StyleKey> keys;
  for (const auto& p : pairs) keys.push_back(p.key);
  const auto avg = average_style_keys(keys);

  const auto tab = build_schedule(cfg.schedule);
  TrainableEstimator est(cfg.arch(), cfg.half_width, cfg.bins, cfg.schedule.T, cfg.train.seed, cfg.parametrization);
  out << "pairs=" << pairs.size() << " parameters=" << est.net().parameter_count() << "\n";
  auto tc = cfg.train;
  tc.log_every = o.log_every;
  const auto res = bbvol::train(est, pairs, tab, tc, [&](int it, double loss) {
    out << "iter " << it << " loss " << loss << "\n";
  });
  const double final_loss = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
  save_checkpoint(est, o.out,
                  {{"config_hash", hash},
                   {"config", to_json(cfg)},
                   {"avg_key", to_json(avg)},
                   {"final_loss", final_loss}});
  if (!o.loss_curve.empty())
    write_json({{"config_hash", hash}, {"loss", res.loss_curve}}, o.loss_curve);
  out << "trained " << tc.iterations << " iterations in " << res.seconds << " s, final loss " << final_loss << "\n";
  out << "checkpoint " << o.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TranslateOpts {
  std::string config, checkpoint, input, out, style_key = "avg", diagnostics;
  std::optional<int> steps, M, threads;
  std::optional<double> lambda;
  std::string correction_norm;
  bool ista = false, naive = false;
};

inline int translate(const TranslateOpts& o, std::ostream& out) {
  auto loaded = load_checkpoint(o.checkpoint);
  const auto& desc = loaded.descriptor;
  ExperimentConfig cfg;
  if (!o.config.empty()) {
    cfg = load_experiment_config(o.config);
  } else if (desc.contains("config")) {
    cfg = experiment_config_from_json(desc.at("config"));
  }
  if (o.ista) cfg.sample.ista = true;
  if (o.naive) cfg.sample.ista = false;
  if (o.steps) cfg.sample.n_steps = *o.steps;
  if (o.M) cfg.sample.M = *o.M;
  if (o.lambda) cfg.sample.lambda = *o.lambda;
  if (o.threads) cfg.sample.threads = *o.threads;
  if (!o.correction_norm.empty()) cfg.sample.norm = parse_correction_norm(o.correction_norm);
  if (cfg.schedule.T != loaded.estimator->T())
    throw ParameterError("translate: config T=" + std::to_string(cfg.schedule.T) + " but checkpoint was trained with T=" +
                         std::to_string(loaded.estimator->T()));
  cfg.sample.validate(cfg.schedule.T);
  const auto hash = config_hash(cfg);
  banner(out, "translate", hash, cfg.sample.seed);

  const auto key = resolve_style_key(o.style_key, loaded.estimator->bins(), &desc);
  Volume Y = min_max_normalize(load_volume(o.input)).volume;
  const auto tab = build_schedule(cfg.schedule);
  const auto res = sample(Y, key, cfg.sample, *loaded.estimator, tab);
  Volume X = res.x0_hat;
  quantize_float32(X);
  save_volume(X, o.out);

  const nlohmann::json sampler = {{"n_steps", cfg.sample.n_steps},
                                  {"ista", cfg.sample.ista},
                                  {"M", cfg.sample.M},
                                  {"lambda", cfg.sample.lambda},
                                  {"correction_norm", to_string(cfg.sample.norm)}};
  write_json({{"config_hash", hash},
              {"checkpoint_config_hash", desc.value("config_hash", "")},
              {"input", o.input},
              {"style_key", o.style_key},
              {"sampler", sampler},
              {"checksum", hex64(float32_checksum(X.data))}},
             o.out + ".json");
  if (!o.diagnostics.empty()) {
    auto d = to_json(res);
    d["config_hash"] = hash;
    write_json(d, o.diagnostics);
  }
  out << "wrote " << o.out << " checksum=" << hex64(float32_checksum(X.data)) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct VerifyCmdOpts {
  std::string config, report;
  std::size_t mc_samples = 100000;
  double fault_delta_cond_scale = 1.0;
};

inline int verify_math(const VerifyCmdOpts& o, std::ostream& out) {
  const auto cfg = load_config_or_default(o.config);
  const auto hash = config_hash(cfg);
  VerifyOptions vo;
  vo.schedule = cfg.schedule;
  vo.mc_samples = o.mc_samples;
  vo.delta_cond_scale = o.fault_delta_cond_scale;
  banner(out, "verify-math", hash, vo.seed);
  const auto rep = run_verification(vo);
  for (const auto& c : rep.checks)
    out << (c.passed ? "PASS " : "FAIL ") << c.name << "  error=" << c.error << " tol=" << c.tolerance << "\n";
  if (!o.report.empty()) {
    auto j = to_json(rep);
    j["config_hash"] = hash;
    write_json(j, o.report);
  }
  out << (rep.passed() ? "all checks passed" : "verification FAILED") << "\n";
  return rep.passed() ? kOk : kVerify;
}

// ---------------------------------------------------------------------------

struct EvalOpts {
  std::string config, pred, target, style_key, out;
};

inline int evaluate(const EvalOpts& o, std::ostream& out) {
  const auto cfg = load_config_or_default(o.config);
  const auto hash = config_hash(cfg);
  banner(out, "evaluate", hash, cfg.phantom.seed);
  const Volume p = load_volume(o.pred), t = load_volume(o.target);
  std::optional<StyleKey> key;
  if (!o.style_key.empty()) key = resolve_style_key(o.style_key, cfg.bins, nullptr);
  auto rep = bbvol::evaluate(p, t, key);
  rep.config_hash = hash;
  const auto j = to_json(rep);
  if (!o.out.empty()) write_json(j, o.out);
  out << "nrmse=" << rep.nrmse << " psnr=" << rep.psnr << " ssim=" << rep.ssim
      << " slice_consistency=" << rep.slice_consistency << " histogram_w1=" << rep.histogram_w1 << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct KeyExtractOpts {
  std::string input, out;
  int bins = kDefaultBins;
};

inline int style_key_extract(const KeyExtractOpts& o, std::ostream& out) {
  ExperimentConfig cfg;
  cfg.bins = o.bins;
  banner(out, "style-key extract", config_hash(cfg), 0);
  const auto k = compute_style_key(load_volume(o.input), o.bins);
  save_style_key(k, o.out);
  out << "wrote " << o.out << " (" << k.bins << " bins)\n";
  return kOk;
}

struct KeyAverageOpts {
  std::vector<std::string> inputs;
  std::string out;
  int bins = kDefaultBins;
};

inline int style_key_average(const KeyAverageOpts& o, std::ostream& out) {
  ExperimentConfig cfg;
  cfg.bins = o.bins;
  banner(out, "style-key average", config_hash(cfg), 0);
  std::vector<StyleKey> keys;
  for (const auto& p : o.inputs) keys.push_back(resolve_style_key(p, o.bins, nullptr));
  const auto k = average_style_keys(keys);
  save_style_key(k, o.out);
  out << "averaged " << keys.size() << " keys into " << o.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct ExportOpts {
  std::string input, axis = "z", out_dir;
  std::optional<std::size_t> index;
};

inline int export_slices(const ExportOpts& o, std::ostream& out) {
  ExperimentConfig cfg;
  banner(out, "export-slices", config_hash(cfg), 0);
  const Axis axis = parse_axis(o.axis);
  const auto images = reslice(load_volume(o.input), axis);
  if (o.index && *o.index >= images.size())
    throw IndexError("export-slices: index " + std::to_string(*o.index) + " out of range [0, " +
                     std::to_string(images.size()) + ")");
  fs::create_directories(o.out_dir);
  std::size_t written = 0;
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (o.index && *o.index != k) continue;
    char name[64];
    std::snprintf(name, sizeof name, "slice_%s_%03zu.pgm", o.axis.c_str(), k);
    save_pgm16(images[k], fs::path(o.out_dir) / name);
    ++written;
  }
  out << "wrote " << written << " PGM slices to " << o.out_dir << "\n";
  return kOk;
}

}  // namespace detail

/// Parses argv and runs one subcommand. Errors are reported on `err` and
/// mapped to exit codes: 2 usage/parameter, 3 data/format/IO, 4 verification.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"bbvol: multi-slice Brownian bridge translation of volumes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "bbvol 1.0");

  detail::GenOpts gen;
  auto* c_gen = app.add_subcommand("gen-phantoms", "generate a seeded phantom dataset (RVOL + manifest)");
  c_gen->add_option("--config", gen.config, "experiment config JSON");
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--n", gen.n, "number of pairs (overrides data.n)");
  c_gen->add_flag("--force", gen.force, "overwrite a non-empty output directory");

  detail::TrainOpts tr;
  auto* c_train = app.add_subcommand("train", "train the noise estimator");
  c_train->add_option("--config", tr.config, "experiment config JSON");
  c_train->add_option("--manifest", tr.manifest, "dataset manifest (overrides data.manifest)");
  c_train->add_option("--out", tr.out, "checkpoint path")->required();
  c_train->add_option("--iterations", tr.iterations, "overrides train.iterations");
  c_train->add_option("--loss-curve", tr.loss_curve, "write the per-iteration loss as JSON");
  c_train->add_option("--log-every", tr.log_every, "progress interval")->capture_default_str();

  detail::TranslateOpts tl;
  auto* c_tl = app.add_subcommand("translate", "translate a source volume");
  c_tl->add_option("--config", tl.config, "experiment config JSON (default: the one stored in the checkpoint)");
  c_tl->add_option("--checkpoint", tl.checkpoint, "trained checkpoint")->required();
  c_tl->add_option("--input", tl.input, "source RVOL")->required();
  c_tl->add_option("--out", tl.out, "output RVOL")->required();
  c_tl->add_option("--style-key", tl.style_key, "avg | key JSON | reference RVOL")->capture_default_str();
  c_tl->add_option("--steps", tl.steps, "sampling steps");
  c_tl->add_flag("--ista", tl.ista, "co-prediction and correction");
  c_tl->add_flag("--naive", tl.naive, "independent per-slice sampling");
  c_tl->add_option("--M", tl.M, "correction iterations per step");
  c_tl->add_option("--lambda", tl.lambda, "correction step scale");
  c_tl->add_option("--correction-norm", tl.correction_norm, "slice | volume");
  c_tl->add_option("--threads", tl.threads, "worker threads (results do not depend on it)");
  c_tl->add_option("--diagnostics", tl.diagnostics, "per-step diagnostics JSON");

  detail::VerifyCmdOpts vf;
  auto* c_vf = app.add_subcommand("verify-math", "run the analytic identity battery");
  c_vf->add_option("--config", vf.config, "experiment config JSON");
  c_vf->add_option("--report", vf.report, "write the report JSON");
  c_vf->add_option("--mc-samples", vf.mc_samples, "Monte Carlo sample count")->capture_default_str();
  c_vf->add_option("--fault-delta-cond-scale", vf.fault_delta_cond_scale)->group("");

  detail::EvalOpts ev;
  auto* c_ev = app.add_subcommand("evaluate", "score a prediction against its target");
  c_ev->add_option("--config", ev.config, "experiment config JSON");
  c_ev->add_option("--pred", ev.pred, "predicted RVOL")->required();
  c_ev->add_option("--target", ev.target, "ground-truth RVOL")->required();
  c_ev->add_option("--style-key", ev.style_key, "key JSON or reference RVOL for histogram_w1");
  c_ev->add_option("--out", ev.out, "write the report JSON");

  auto* c_key = app.add_subcommand("style-key", "extract or average style keys");
  c_key->require_subcommand(1);
  detail::KeyExtractOpts kx;
  auto* c_kx = c_key->add_subcommand("extract", "style key of a volume");
  c_kx->add_option("--input", kx.input, "RVOL volume")->required();
  c_kx->add_option("--out", kx.out, "key JSON")->required();
  c_kx->add_option("--bins", kx.bins, "histogram bins")->capture_default_str();
  detail::KeyAverageOpts ka;
  auto* c_ka = c_key->add_subcommand("average", "average several keys");
  c_ka->add_option("--inputs", ka.inputs, "key JSON files or RVOL volumes")->required();
  c_ka->add_option("--out", ka.out, "key JSON")->required();
  c_ka->add_option("--bins", ka.bins, "histogram bins (RVOL inputs)")->capture_default_str();

  detail::ExportOpts ex;
  auto* c_ex = app.add_subcommand("export-slices", "write 16-bit PGM slices");
  c_ex->add_option("--input", ex.input, "RVOL volume")->required();
  c_ex->add_option("--axis", ex.axis, "z | y | x")->capture_default_str();
  c_ex->add_option("--out-dir", ex.out_dir, "output directory")->required();
  c_ex->add_option("--index", ex.index, "export one slice only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    if (*c_gen) return detail::gen_phantoms(gen, out);
    if (*c_train) return detail::train(tr, out);
    if (*c_tl) return detail::translate(tl, out);
    if (*c_vf) return detail::verify_math(vf, out);
    if (*c_ev) return detail::evaluate(ev, out);
    if (*c_kx) return detail::style_key_extract(kx, out);
    if (*c_ka) return detail::style_key_average(ka, out);
    if (*c_ex) return detail::export_slices(ex, out);
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const LookupError& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"bbvol"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace bbvol::cli
