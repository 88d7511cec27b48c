// Acceptance suite: one PASS/FAIL line per criterion.
//
//   bbvol_acceptance [--config desk.json] [--only 1,2,8] [--work-dir dir]
//                    [--report out.json] [--allow-fail 6a]
//
// Exit status is 0 when every criterion passes or is listed in --allow-fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bbvol/cli.hpp"
#include "bbvol/config.hpp"
#include "bbvol/estimator.hpp"
#include "bbvol/metrics.hpp"
#include "bbvol/phantom.hpp"
#include "bbvol/sampler.hpp"
#include "bbvol/schedule.hpp"
#include "bbvol/style_key.hpp"
#include "bbvol/unet.hpp"
#include "bbvol/verify.hpp"
#include "bbvol/volume.hpp"
#include "support/metric_oracles.hpp"

using namespace bbvol;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

struct Outcome {
  std::string id, title;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

class Suite {
 public:
  explicit Suite(std::set<std::string> allow) : allow_(std::move(allow)) {}

  void record(Outcome o) {
    std::cout << (o.passed ? "PASS" : "FAIL") << "  " << std::left << std::setw(4) << o.id << o.title << " | "
              << o.detail << " [" << fmt(o.seconds, 3) << " s]" << std::endl;
    results_.push_back(std::move(o));
  }

  int exit_code() const {
    for (const auto& o : results_)
      if (!o.passed && !allow_.count(o.id)) return 1;
    return 0;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& o : results_)
      arr.push_back({{"id", o.id}, {"title", o.title}, {"passed", o.passed}, {"detail", o.detail}, {"seconds", o.seconds}});
    return {{"schema", "bbvol.acceptance"}, {"version", 1}, {"criteria", arr}};
  }

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(results_.begin(), results_.end(), [](const Outcome& o) { return !o.passed; }));
  }

 private:
  std::set<std::string> allow_;
  std::vector<Outcome> results_;
};

PhantomPair phantom32(std::uint64_t seed) {
  PhantomConfig c;
  c.Z = c.H = c.W = 32;
  c.seed = seed;
  return generate_pair(c);
}

// ---------------------------------------------------------------------------
// 1-3, 5: analytic identities

Outcome criterion1() {
  const auto t0 = Clock::now();
  const auto tab = build_schedule({1000, 1.0});
  Rng rng(2024);
  const auto mc = verify::composition_checks(tab, rng, 100000);
  const auto bayes = verify::bayes_check(tab, rng, 50, 1e-10);
  const double secs = since(t0);
  const bool ok = mc[0].passed && mc[1].passed && bayes.passed && secs < 30.0;
  return {"1", "schedule identities (MC composition, conjugate Bayes)", ok,
          "mean rel " + fmt(mc[0].error) + " < 0.01, var rel " + fmt(mc[1].error) + " < 0.02, Bayes " + fmt(bayes.error) +
              " < 1e-10, runtime < 30 s",
          secs};
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  const auto tab = build_schedule({});
  const auto p = phantom32(4242);
  OracleEstimator oracle(1);
  oracle.add(p.target);
  const auto key = compute_style_key(p.target);
  double worst = 0.0;
  for (int steps : {10, 50, 100})
    for (int M : {0, 1}) {
      const auto r = ista_sample(p.source, key, SamplerConfig{steps, true, M}, oracle, tab);
      worst = std::max(worst, verify::max_abs_diff(r.x0_hat, p.target));
    }
  const double secs = since(t0);
  return {"2", "oracle end-to-end recovery, 32^3, steps {10,50,100} x M {0,1}", worst < 1e-5 && secs < 60.0,
          "max abs error " + fmt(worst) + " < 1e-5, runtime < 60 s", secs};
}

Outcome criterion3() {
  const auto t0 = Clock::now();
  const auto tab = build_schedule({});
  const auto p = phantom32(77);
  OracleEstimator oracle(1);
  oracle.add(p.target);
  const auto key = compute_style_key(p.target);
  Rng rng(31);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const int t = static_cast<int>(rng.uniform_int(1, tab.T() - 1));
    Volume noise(p.target.Z, p.target.H, p.target.W);
    for (double& v : noise.data) v = rng.normal();
    const auto X = forward_sample(p.target, p.source, t, noise, tab);
    const auto S = score(X, p.source, key, t, oracle, tab);
    const double m = tab.m(t), d = tab.delta(t);
    for (std::size_t i = 0; i < S.data.size(); ++i) {
      const double closed = -(X.data[i] - ((1 - m) * p.target.data[i] + m * p.source.data[i])) / d;
      worst = std::max(worst, std::abs(S.data[i] - closed) / std::max(1.0, std::abs(closed)));
    }
  }
  return {"3", "score via co-prediction equals closed form (20 random t)", worst < 1e-10,
          "max rel error " + fmt(worst) + " < 1e-10", since(t0)};
}

Outcome criterion5() {
  const auto t0 = Clock::now();
  const auto tab = build_schedule({});
  const auto p = phantom32(5);
  OracleEstimator oracle(1);
  oracle.add(p.target);
  const auto key = compute_style_key(p.target);
  double worst = 0.0;
  for (int t : {50, 250, 500, 750, 950}) {
    Volume mean = p.target;
    mean.id = p.source.id;
    const double m = tab.m(t);
    for (std::size_t i = 0; i < mean.data.size(); ++i) mean.data[i] = (1 - m) * p.target.data[i] + m * p.source.data[i];
    for (int M : {1, 2})
      for (auto norm : {CorrectionNorm::volume, CorrectionNorm::slice})
        worst = std::max(worst, verify::max_abs_diff(correct(mean, p.source, key, t, 0.5, M, oracle, tab, norm), mean));
  }
  return {"5", "correction leaves the marginal mean fixed, M in {1,2}", worst < 1e-12,
          "max abs change " + fmt(worst) + " < 1e-12", since(t0)};
}

// ---------------------------------------------------------------------------
// 8-9: metric oracles and formats

Outcome criterion8() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto a = oracle::random_volume(8, 8, 8, seed), b = oracle::random_volume(8, 8, 8, seed + 500);
    worst = std::max({worst, std::abs(ssim(a, b) - oracle::brute_ssim(a, b)),
                      std::abs(psnr(a, b) - oracle::brute_psnr(a, b)),
                      std::abs(nrmse(a, b) - oracle::brute_nrmse(a, b))});
  }
  const auto a = oracle::random_volume(8, 8, 8, 99);
  const bool trivial = nrmse(a, a) == 0.0 && psnr(a, a) == 200.0 && ssim(a, a) == 1.0;
  return {"8", "metric oracles on random 8^3 volumes", worst < 1e-8 && trivial,
          "max deviation " + fmt(worst) + " < 1e-8, identical inputs give 0/200/1: " + (trivial ? "yes" : "no"), since(t0)};
}

double gradient_check_worst() {
  UNetArch a = TrainableEstimator::default_arch(1, 4, true);
  a.base_width = 4;
  a.groups = 2;
  a.emb_dim = 8;
  UNet<double> net(a, 7);
  Rng r(1);
  nn::Tensor<double> x(6, 8, 8);
  for (auto& v : x.v) v = r.normal();
  nn::Tensor<double> tgt(3, 8, 8);
  for (auto& v : tgt.v) v = r.normal();
  std::vector<double> key(12);
  for (auto& v : key) v = r.uniform();
  auto loss = [&] {
    const auto y = net.forward(x, 37, key);
    double L = 0;
    for (std::size_t i = 0; i < y.v.size(); ++i) L += (y.v[i] - tgt.v[i]) * (y.v[i] - tgt.v[i]);
    return L / y.v.size();
  };
  net.zero_grad();
  UNet<double>::Trace tr;
  const auto y = net.forward(x, 37, key, &tr);
  nn::Tensor<double> dy(3, 8, 8);
  for (std::size_t i = 0; i < y.v.size(); ++i) dy.v[i] = 2 * (y.v[i] - tgt.v[i]) / y.v.size();
  net.backward(dy, tr);

  std::vector<std::pair<nn::Param<double>*, std::size_t>> all;
  for (auto* p : net.params())
    for (std::size_t i = 0; i < p->size(); ++i) all.emplace_back(p, i);
  Rng pick(11);
  double worst = 0.0;
  for (int checked = 0; checked < 10;) {
    auto [p, i] = all[static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(all.size()) - 1))];
    if (std::abs(p->grad[i]) < 1e-7) continue;
    const double o = p->value[i], h = 1e-6;
    p->value[i] = o + h;
    const double lp = loss();
    p->value[i] = o - h;
    const double lm = loss();
    p->value[i] = o;
    const double fd = (lp - lm) / (2 * h);
    worst = std::max(worst, std::abs(fd - p->grad[i]) / std::max(std::abs(fd), std::abs(p->grad[i])));
    ++checked;
  }
  return worst;
}

Outcome criterion9(const fs::path& work) {
  const auto t0 = Clock::now();
  auto v = phantom32(9).target;
  quantize_float32(v);
  save_volume(v, work / "roundtrip.rvol");
  const auto back = load_volume(work / "roundtrip.rvol");
  const bool rvol_ok = back.data == v.data && back.Z == v.Z && back.H == v.H && back.W == v.W &&
                       rvol::encode(back) == read_file_bytes(work / "roundtrip.rvol");

  auto arch = TrainableEstimator::default_arch(1, 16, true);
  arch.base_width = 8;
  arch.groups = 4;
  arch.emb_dim = 16;
  TrainableEstimator est(arch, 1, 16, 1000, 3);
  save_checkpoint(est, work / "roundtrip.bvck", {{"note", "acceptance"}});
  const auto bytes = read_file_bytes(work / "roundtrip.bvck");
  const auto loaded = load_checkpoint(work / "roundtrip.bvck");
  const bool ck_ok = checkpoint::encode(*loaded.estimator, {{"note", "acceptance"}}) == bytes;

  const double g = gradient_check_worst();
  return {"9", "RVOL and checkpoint bit-exact round trips, gradient check", rvol_ok && ck_ok && g < 1e-4,
          std::string("RVOL ") + (rvol_ok ? "exact" : "MISMATCH") + ", checkpoint " + (ck_ok ? "exact" : "MISMATCH") +
              ", gradient rel error " + fmt(g) + " < 1e-4",
          since(t0)};
}

// ---------------------------------------------------------------------------
// 4, 6, 7: trained models

struct Desk {
  ExperimentConfig cfg;
  ScheduleTable tab;
  std::vector<TrainingPair> pairs;
  StyleKey avg;
  std::unique_ptr<TrainableEstimator> skc, pure;
  double train_seconds = 0.0;
  std::vector<DatasetEntry> test;
};

std::unique_ptr<TrainableEstimator> train_model(const Desk& d, bool use_key) {
  auto cfg = d.cfg;
  cfg.use_style_key = use_key;
  auto est = std::make_unique<TrainableEstimator>(cfg.arch(), cfg.half_width, cfg.bins, cfg.schedule.T, cfg.train.seed,
                                                  cfg.parametrization);
  auto tc = cfg.train;
  tc.log_every = std::max(1, tc.iterations / 5);
  const auto res = bbvol::train(*est, d.pairs, d.tab, tc, [&](int it, double loss) {
    std::cout << "  [" << (use_key ? "skc" : "pure") << "] iter " << it << " loss " << fmt(loss) << std::endl;
  });
  std::cout << "  [" << (use_key ? "skc" : "pure") << "] trained in " << fmt(res.seconds) << " s" << std::endl;
  return est;
}

Desk& desk(const ExperimentConfig& cfg, std::size_t n_test) {
  static std::unique_ptr<Desk> d;
  if (d) return *d;
  d = std::make_unique<Desk>();
  d->cfg = cfg;
  d->tab = build_schedule(cfg.schedule);
  std::vector<StyleKey> keys;
  for (const auto& e : generate_dataset(cfg.n_pairs, cfg.phantom, cfg.style_seed)) {
    d->pairs.push_back(make_training_pair(e.pair, cfg.bins));
    keys.push_back(d->pairs.back().key);
  }
  d->avg = average_style_keys(keys);
  auto held_out = cfg.phantom;
  held_out.seed = cfg.phantom.seed + 100000;
  d->test = generate_dataset(n_test, held_out, cfg.style_seed + 100000);

  const auto t0 = Clock::now();
  d->skc = train_model(*d, true);
  d->pure = train_model(*d, false);
  d->train_seconds = since(t0);
  return *d;
}

// Held-out styles are drawn independently per volume, so each target serves
// as the reference volume for its own key; the averaged key is reported too.
std::vector<Outcome> criterion6(Desk& d) {
  const auto t0 = Clock::now();
  const auto naive = SamplerConfig::naive(d.cfg.sample.n_steps);
  SamplerConfig ista = SamplerConfig::ista_default();
  ista.lambda = d.cfg.sample.lambda;
  ista.norm = d.cfg.sample.norm;
  const auto cp_only = SamplerConfig::cp_only(ista.n_steps);

  double s_pure = 0, s_skc = 0, s_cp = 0, s_ista = 0, s_avg = 0, sc_naive = 0, sc_ista = 0, sc_truth = 0, adj_naive = 0, adj_ista = 0;
  for (const auto& e : d.test) {
    const auto& Y = e.pair.source;
    const auto& X0 = e.pair.target;
    const auto key = compute_style_key(X0, d.cfg.bins);
    const auto pure = sample(Y, key, naive, *d.pure, d.tab).x0_hat;
    const auto skc = sample(Y, key, naive, *d.skc, d.tab).x0_hat;
    const auto cp = sample(Y, key, cp_only, *d.skc, d.tab).x0_hat;
    const auto full = sample(Y, key, ista, *d.skc, d.tab).x0_hat;
    const auto avg = sample(Y, d.avg, ista, *d.skc, d.tab).x0_hat;
    const double a = ssim(pure, X0), b = ssim(skc, X0), c = ssim(full, X0), g = ssim(avg, X0), q = ssim(cp, X0);
    const auto dn = slice_consistency_detailed(skc), di = slice_consistency_detailed(full);
    const double sn = dn.total(), si = di.total(), st = slice_consistency(X0);
    adj_naive += dn.adjacent_ssim_term;
    adj_ista += di.adjacent_ssim_term;
    std::cout << "  held-out seed " << e.config.seed << ": SSIM pure " << fmt(a) << ", +SKC " << fmt(b) << ", +SKC,cp-only " << fmt(q)
              << ", +SKC,ISTA " << fmt(c) << " (averaged key " << fmt(g) << "); slice_consistency naive " << fmt(sn) << ", ISTA "
              << fmt(si) << ", truth " << fmt(st) << std::endl;
    s_pure += a;
    s_skc += b;
    s_cp += q;
    s_ista += c;
    s_avg += g;
    sc_naive += sn;
    sc_ista += si;
    sc_truth += st;
  }
  const double n = static_cast<double>(d.test.size());
  s_pure /= n;
  s_skc /= n;
  s_cp /= n;
  s_ista /= n;
  s_avg /= n;
  sc_naive /= n;
  sc_ista /= n;
  sc_truth /= n;
  adj_naive /= n;
  adj_ista /= n;
  const double secs = since(t0) + d.train_seconds;
  const bool budget = d.train_seconds <= 1800.0;
  const std::string tail = " (" + std::to_string(d.test.size()) + " held-out volumes, reference-volume keys; averaged key " +
                           fmt(s_avg) + "; training " + fmt(d.train_seconds) + " s <= 1800 s)";
  return {
      {"6a", "desk training: translated SSIM >= 0.80 within a 30 min training budget", s_ista >= 0.80 && budget,
       "mean SSIM " + fmt(s_ista) + tail, secs},
      {"6b", "ISTA slice_consistency <= 0.8 x naive", sc_ista <= 0.8 * sc_naive,
       "ISTA " + fmt(sc_ista) + " vs naive " + fmt(sc_naive) + " (bound " + fmt(0.8 * sc_naive) + ", ground truth " +
           fmt(sc_truth) + "; adjacent-SSIM term ISTA " + fmt(adj_ista) + " vs naive " + fmt(adj_naive) + ")",
       0.0},
      {"6c", "ablation ordering pure <= +SKC <= +SKC,ISTA in SSIM (0.005 slack)",
       s_pure <= s_skc + 0.005 && s_skc <= s_ista + 0.005,
       "pure " + fmt(s_pure) + ", +SKC " + fmt(s_skc) + ", +SKC,ISTA " + fmt(s_ista), 0.0},
      {"P1", "sampler ordering +SKC <= +SKC,ISTA_cp-only <= +SKC,ISTA in SSIM (0.005 slack)",
       s_skc <= s_cp + 0.005 && s_cp <= s_ista + 0.005,
       "+SKC " + fmt(s_skc) + ", cp-only " + fmt(s_cp) + ", ISTA " + fmt(s_ista), 0.0}};
}

Outcome criterion4(Desk& d, const fs::path& work) {
  const auto t0 = Clock::now();
  const auto ck = work / "desk_skc.bvck";
  save_checkpoint(*d.skc, ck,
                  {{"config_hash", config_hash(d.cfg)}, {"config", to_json(d.cfg)}, {"avg_key", to_json(d.avg)}});
  const auto input = work / "translate_source.rvol";
  save_volume(d.test.front().pair.source, input);
  auto run = [&](int threads) {
    const auto out = work / ("translate_t" + std::to_string(threads) + ".rvol");
    std::ostringstream sink;
    const int rc = cli::run({"translate", "--checkpoint", ck.string(), "--input", input.string(), "--out",
                             out.string(), "--ista", "--steps", "50", "--M", "1", "--threads", std::to_string(threads)},
                            sink, sink);
    if (rc != 0) throw std::runtime_error("translate failed: " + sink.str());
    return read_file_bytes(out);
  };
  const auto one = run(1), four = run(4);
  return {"4", "translate determinism, ISTA, 4 threads vs 1", one == four,
          std::string(one == four ? "bit-identical" : "DIFFERENT") + " (" + std::to_string(one.size()) + " bytes)",
          since(t0)};
}

Outcome criterion7(Desk& d, int steps) {
  const auto t0 = Clock::now();
  const auto cfg = SamplerConfig::naive(steps);
  int wins = 0;
  std::string per;
  for (int k = 0; k < 10; ++k) {
    const auto& Y = d.test[static_cast<std::size_t>(k) % d.test.size()].pair.source;
    const auto& ka = d.pairs[static_cast<std::size_t>(k)].key;
    const auto& kb = d.pairs[static_cast<std::size_t>(k + 10) % d.pairs.size()].key;
    const auto A = sample(Y, ka, cfg, *d.skc, d.tab).x0_hat;
    const auto B = sample(Y, kb, cfg, *d.skc, d.tab).x0_hat;
    const auto ha = compute_style_key(A, d.cfg.bins), hb = compute_style_key(B, d.cfg.bins);
    const bool win = histogram_distance(ha, ka) < histogram_distance(ha, kb) &&
                     histogram_distance(hb, kb) < histogram_distance(hb, ka);
    wins += win ? 1 : 0;
    per += win ? '+' : '-';
  }
  return {"7", "style key controllability (own key closer in histogram W1)", wins >= 9,
          std::to_string(wins) + "/10 trials [" + per + "], naive sampling with " + std::to_string(steps) + " steps",
          since(t0)};
}

std::set<std::string> split(const std::string& s) {
  std::set<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.insert(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bbvol acceptance suite"};
  std::string config_path, only, work_dir = "acceptance_work", report, allow_fail;
  std::size_t n_test = 3;
  int control_steps = 20;
  app.add_option("--config", config_path, "experiment config for the trained criteria");
  app.add_option("--only", only, "comma-separated criteria to run (1..9)");
  app.add_option("--work-dir", work_dir, "scratch directory");
  app.add_option("--report", report, "write a JSON summary here");
  app.add_option("--allow-fail", allow_fail, "comma-separated criterion ids that do not affect the exit status");
  app.add_option("--test-volumes", n_test, "held-out volumes for criterion 6")->check(CLI::PositiveNumber);
  app.add_option("--control-steps", control_steps, "sampling steps for criterion 7")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const auto want = split(only);
  auto enabled = [&](const std::string& id) { return want.empty() || want.count(id); };

  try {
    fs::create_directories(work_dir);
    const ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_experiment_config(config_path);
    Suite suite(split(allow_fail));
    std::cout << "config_hash=" << config_hash(cfg) << std::endl;

    if (enabled("1")) suite.record(criterion1());
    if (enabled("2")) suite.record(criterion2());
    if (enabled("3")) suite.record(criterion3());
    if (enabled("5")) suite.record(criterion5());
    if (enabled("8")) suite.record(criterion8());
    if (enabled("9")) suite.record(criterion9(work_dir));
    if (enabled("6") || enabled("4") || enabled("7")) {
      auto& d = desk(cfg, n_test);
      if (enabled("6"))
        for (auto& o : criterion6(d)) suite.record(std::move(o));
      if (enabled("4")) suite.record(criterion4(d, work_dir));
      if (enabled("7")) suite.record(criterion7(d, control_steps));
    }
    std::cout << suite.failures() << " criteria failed" << std::endl;
    if (!report.empty()) std::ofstream(report) << suite.to_json().dump(1) << "\n";
    return suite.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << "\n";
    return 3;
  }
}
