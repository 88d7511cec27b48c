#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "bbvol/cli.hpp"
#include "bbvol/config.hpp"
#include "bbvol/manifest.hpp"
#include "bbvol/verify.hpp"

using namespace bbvol;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("bbvol_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

const char* kTinyConfig = R"({
  "data": {"n": 2, "bins": 16, "phantom": {"size": [8, 16, 16]}},
  "train": {"iterations": 3, "batch_size": 2, "base_width": 4, "groups": 2, "emb_dim": 8, "lr": 1e-3},
  "sample": {"n_steps": 6, "ista": true, "M": 1}
})";

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const auto back = experiment_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(c.schedule.T, 1000);
  EXPECT_EQ(c.sample.n_steps, 100);
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"shedule": {}})")), ParameterError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"train": {"lr": 1e-3, "momentum": 0.9}})")),
               ParameterError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"data": {"phantom": {"colour": 1}}})")),
               ParameterError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"sample": {"n_steps": "many"}})")), ParameterError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"sample": {"n_steps": 2000}})")), ParameterError);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"schedule": {"T": 1}})")), ParameterError);
}

TEST(Config, HashTracksSemanticsOnly) {
  ExperimentConfig a;
  ExperimentConfig b = a;
  b.sample.threads = 8;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.sample.n_steps = 50;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Verify, DefaultBatteryPasses) {
  const auto rep = run_verification({});
  for (const auto& c : rep.checks) EXPECT_TRUE(c.passed) << c.name << " error " << c.error;
  EXPECT_GE(rep.checks.size(), 10u);
}

TEST(Verify, WrongTransitionVarianceFailsBayesCheck) {
  VerifyOptions o;
  o.delta_cond_scale = 1.01;
  const auto rep = run_verification(o);
  EXPECT_FALSE(rep.passed());
  bool bayes_failed = false;
  for (const auto& c : rep.checks)
    if (c.name.find("Bayes") != std::string::npos) bayes_failed = !c.passed;
  EXPECT_TRUE(bayes_failed);
}

TEST(Verify, ReportJsonRoundTrip) {
  VerifyOptions o;
  o.mc_samples = 2000;
  const auto rep = run_verification(o);
  const auto back = verify_report_from_json(nlohmann::json::parse(to_json(rep).dump()));
  ASSERT_EQ(back.checks.size(), rep.checks.size());
  for (std::size_t k = 0; k < rep.checks.size(); ++k) {
    EXPECT_EQ(back.checks[k].name, rep.checks[k].name);
    EXPECT_EQ(back.checks[k].error, rep.checks[k].error);
    EXPECT_EQ(back.checks[k].passed, rep.checks[k].passed);
  }
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(run({"translate", "--input", "x.rvol"}).code, cli::kUsage);
  EXPECT_EQ(run({"--help"}).code, cli::kOk);
}

TEST(Cli, GenPhantomsSafetyAndChecksum) {
  TempDir d("gen");
  const auto first = run({"gen-phantoms", "--out", d / "ds", "--n", "20"});
  ASSERT_EQ(first.code, cli::kOk) << first.err;
  EXPECT_NE(first.out.find("config_hash="), std::string::npos);
  EXPECT_NE(first.out.find("seed=42"), std::string::npos);
  EXPECT_NE(first.out.find("manifest_checksum=c21ba61c5ae79dc5"), std::string::npos) << first.out;

  const auto again = run({"gen-phantoms", "--out", d / "ds", "--n", "20"});
  EXPECT_EQ(again.code, cli::kUsage);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  const auto forced = run({"gen-phantoms", "--out", d / "ds", "--n", "20", "--force"});
  EXPECT_EQ(forced.code, cli::kOk);
  EXPECT_EQ(forced.out, first.out);

  EXPECT_EQ(run({"gen-phantoms", "--out", d / "empty", "--n", "0"}).code, cli::kUsage);

  const auto m = load_manifest(d / "ds/manifest.json");
  ASSERT_EQ(m.pairs.size(), 20u);
  EXPECT_EQ(m.pairs[3].seed, 45u);
  const auto pairs = load_training_pairs(d / "ds/manifest.json", 128);
  EXPECT_EQ(pairs.size(), 20u);
}

TEST(Cli, TamperedDatasetIsDataError) {
  TempDir d("tamper");
  ASSERT_EQ(run({"gen-phantoms", "--out", d / "ds", "--n", "2"}).code, cli::kOk);
  Volume v = load_volume(d / "ds/pair_001_target.rvol");
  v.data[5] += 0.25;
  save_volume(v, d / "ds/pair_001_target.rvol");
  EXPECT_THROW(load_training_pairs(d / "ds/manifest.json", 128), FormatError);
  const auto r = run({"train", "--manifest", d / "ds/manifest.json", "--out", d / "m.bvck", "--iterations", "1"});
  EXPECT_EQ(r.code, cli::kData);
}

TEST(Cli, ConfigErrorsMapToUsage) {
  TempDir d("cfg");
  write_text(d / "bad.json", R"({"train": {"learning_rate": 1}})");
  EXPECT_EQ(run({"verify-math", "--config", d / "bad.json"}).code, cli::kUsage);
  write_text(d / "broken.json", "{not json");
  EXPECT_EQ(run({"verify-math", "--config", d / "broken.json"}).code, cli::kData);
}

TEST(Cli, VerifyMathExitCodes) {
  TempDir d("verify");
  const auto ok = run({"verify-math", "--report", d / "rep.json"});
  EXPECT_EQ(ok.code, cli::kOk) << ok.out;
  const auto rep = verify_report_from_json(cli::detail::read_json(d / "rep.json"));
  EXPECT_TRUE(rep.passed());
  EXPECT_EQ(run({"verify-math", "--fault-delta-cond-scale", "1.01"}).code, cli::kVerify);
}

TEST(Cli, PipelineIsDeterministic) {
  TempDir d("pipe");
  write_text(d / "cfg.json", kTinyConfig);
  ASSERT_EQ(run({"gen-phantoms", "--config", d / "cfg.json", "--out", d / "ds"}).code, cli::kOk);
  const auto tr = run({"train", "--config", d / "cfg.json", "--manifest", d / "ds/manifest.json", "--out", d / "m.bvck",
                       "--loss-curve", d / "loss.json"});
  ASSERT_EQ(tr.code, cli::kOk) << tr.err;
  const auto ck = load_checkpoint(d / "m.bvck");
  EXPECT_TRUE(ck.descriptor.contains("config_hash"));
  EXPECT_TRUE(ck.descriptor.contains("avg_key"));

  const std::string src = d / "ds/pair_000_source.rvol", tgt = d / "ds/pair_000_target.rvol";
  const auto a = run({"translate", "--checkpoint", d / "m.bvck", "--input", src, "--out", d / "a.rvol", "--threads", "1",
                      "--diagnostics", d / "diag.json"});
  ASSERT_EQ(a.code, cli::kOk) << a.err;
  const auto b = run({"translate", "--checkpoint", d / "m.bvck", "--input", src, "--out", d / "b.rvol", "--threads", "4"});
  ASSERT_EQ(b.code, cli::kOk) << b.err;
  EXPECT_EQ(read_file_bytes(d / "a.rvol"), read_file_bytes(d / "b.rvol"));
  const auto side = cli::detail::read_json(d / "a.rvol.json");
  EXPECT_EQ(side.at("config_hash"), cli::detail::read_json(d / "b.rvol.json").at("config_hash"));
  EXPECT_EQ(cli::detail::read_json(d / "diag.json").at("steps").size(), 6u);

  EXPECT_EQ(run({"style-key", "extract", "--input", tgt, "--bins", "16", "--out", d / "k.json"}).code, cli::kOk);
  const auto naive = run({"translate", "--checkpoint", d / "m.bvck", "--input", src, "--out", d / "n.rvol", "--naive",
                          "--style-key", d / "k.json"});
  ASSERT_EQ(naive.code, cli::kOk) << naive.err;
  EXPECT_NE(read_file_bytes(d / "n.rvol"), read_file_bytes(d / "a.rvol"));
  EXPECT_EQ(run({"translate", "--checkpoint", d / "m.bvck", "--input", src, "--out", d / "r.rvol", "--style-key", tgt}).code,
            cli::kOk);

  const auto ev = run({"evaluate", "--pred", d / "a.rvol", "--target", tgt, "--out", d / "rep.json"});
  ASSERT_EQ(ev.code, cli::kOk) << ev.err;
  const auto rep = eval_report_from_json(cli::detail::read_json(d / "rep.json"));
  EXPECT_TRUE(std::isfinite(rep.ssim));
  EXPECT_EQ(rep.config_hash.size(), 16u);
}

TEST(Cli, EvaluateIdentity) {
  TempDir d("eval");
  ASSERT_EQ(run({"gen-phantoms", "--out", d / "ds", "--n", "1"}).code, cli::kOk);
  const std::string tgt = d / "ds/pair_000_target.rvol";
  ASSERT_EQ(run({"evaluate", "--pred", tgt, "--target", tgt, "--style-key", tgt, "--out", d / "r.json"}).code, cli::kOk);
  const auto r = eval_report_from_json(cli::detail::read_json(d / "r.json"));
  EXPECT_EQ(r.nrmse, 0.0);
  EXPECT_EQ(r.psnr, 200.0);
  EXPECT_NEAR(r.ssim, 1.0, 1e-15);
  EXPECT_EQ(r.histogram_w1, 0.0);
  EXPECT_EQ(run({"evaluate", "--pred", d / "missing.rvol", "--target", tgt}).code, cli::kData);
}

TEST(Cli, StyleKeysAndSlices) {
  TempDir d("keys");
  ASSERT_EQ(run({"gen-phantoms", "--out", d / "ds", "--n", "2"}).code, cli::kOk);
  ASSERT_EQ(run({"style-key", "extract", "--input", d / "ds/pair_000_target.rvol", "--out", d / "k0.json"}).code, cli::kOk);
  ASSERT_EQ(run({"style-key", "average", "--inputs", d / "k0.json", d / "ds/pair_001_target.rvol", "--out", d / "avg.json"})
                .code,
            cli::kOk);
  const auto k = load_style_key(d / "avg.json");
  EXPECT_EQ(k.bins, 128);
  EXPECT_NEAR(k.cum.back(), 1.0, 1e-12);

  ASSERT_EQ(run({"export-slices", "--input", d / "ds/pair_000_source.rvol", "--axis", "y", "--out-dir", d / "png"}).code,
            cli::kOk);
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(d / "png")) ++n;
  EXPECT_EQ(n, 32u);
  EXPECT_EQ(run({"export-slices", "--input", d / "ds/pair_000_source.rvol", "--index", "40", "--out-dir", d / "x"}).code,
            cli::kUsage);
  EXPECT_EQ(run({"export-slices", "--input", d / "ds/pair_000_source.rvol", "--axis", "q", "--out-dir", d / "x"}).code,
            cli::kUsage);
}
