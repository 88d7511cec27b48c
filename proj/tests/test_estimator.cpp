#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "bbvol/estimator.hpp"
#include "bbvol/metrics.hpp"
#include "bbvol/phantom.hpp"
#include "bbvol/sampler.hpp"
#include "bbvol/schedule.hpp"

using namespace bbvol;

namespace {

PhantomPair small_pair(std::size_t n = 12, std::uint64_t seed = 5) {
  PhantomConfig c;
  c.Z = c.H = c.W = n;
  c.seed = seed;
  return generate_pair(c);
}

UNetArch tiny_arch(std::size_t N = 1, int bins = 16, bool key = true) {
  auto a = TrainableEstimator::default_arch(N, bins, key);
  a.base_width = 4;
  a.groups = 2;
  a.emb_dim = 8;
  return a;
}

}  // namespace

TEST(Oracle, BridgeEndpoints) {
  const auto p = small_pair();
  const auto tab = build_schedule({});
  OracleEstimator o(1);
  o.add(p.target);
  const StyleKey key = compute_style_key(p.target);

  Volume zero(p.target.Z, p.target.H, p.target.W);
  const Volume x_start = forward_sample(p.target, p.source, 0, zero, tab);
  for (std::size_t i : {std::size_t{0}, std::size_t{5}, p.target.Z - 1}) {
    const auto r = o.predict(extract_subvolume(x_start, i, 1), extract_subvolume(p.source, i, 1), key, 0);
    for (double v : r.data) EXPECT_EQ(v, 0.0);
    const Volume x_end = forward_sample(p.target, p.source, tab.T(), zero, tab);
    const auto e = o.predict(extract_subvolume(x_end, i, 1), extract_subvolume(p.source, i, 1), key, tab.T());
    const auto ys = extract_subvolume(p.source, i, 1), xs = extract_subvolume(p.target, i, 1);
    for (std::size_t k = 0; k < e.data.size(); ++k) EXPECT_EQ(e.data[k], ys.stack.data[k] - xs.stack.data[k]);
  }
}

TEST(Oracle, ForwardSampleIdentity) {
  const auto p = small_pair();
  const auto tab = build_schedule({});
  OracleEstimator o(2);
  o.add(p.target);
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const int t = static_cast<int>(rng.uniform_int(1, tab.T() - 1));
    Volume eps(p.target.Z, p.target.H, p.target.W);
    for (double& v : eps.data) v = rng.normal();
    const Volume xt = forward_sample(p.target, p.source, t, eps, tab);
    const std::size_t i = static_cast<std::size_t>(rng.uniform_int(0, 11));
    const auto pred = o.predict_stack(extract_subvolume(xt, i, 2));
    const auto ys = extract_subvolume(p.source, i, 2), xs = extract_subvolume(p.target, i, 2),
               es = extract_subvolume(eps, i, 2);
    for (std::size_t k = 0; k < pred.data.size(); ++k) {
      const double resid = pred.data[k] - tab.m(t) * (ys.stack.data[k] - xs.stack.data[k]);
      EXPECT_NEAR(resid, std::sqrt(tab.delta(t)) * es.stack.data[k], 1e-6);
    }
  }
}

TEST(Oracle, UnknownVolume) {
  OracleEstimator o(1);
  Volume v(3, 4, 4);
  v.id = 99;
  EXPECT_THROW(o.predict_stack(extract_subvolume(v, 1, 1)), LookupError);
}

TEST(TrainingExampleTest, PinnedEnd) {
  const auto p = small_pair();
  const auto pair = make_training_pair(p);
  const auto tab = build_schedule({});
  Rng rng(1);
  const auto ex = make_training_example(pair, tab, 1, rng, {tab.T(), 4, false});
  const auto ys = extract_subvolume(p.source, 4, 1), xs = extract_subvolume(p.target, 4, 1);
  EXPECT_EQ(ex.x_t.stack.data, ys.stack.data);
  for (std::size_t k = 0; k < ex.target.data.size(); ++k) EXPECT_EQ(ex.target.data[k], ys.stack.data[k] - xs.stack.data[k]);
  EXPECT_EQ(ex.key.hist, compute_style_key(p.target).hist);
}

TEST(TrainingExampleTest, NoiselessBridgePoint) {
  const auto p = small_pair();
  const auto pair = make_training_pair(p);
  const auto tab = build_schedule({});
  Rng rng(2);
  const int t = 321;
  const auto ex = make_training_example(pair, tab, 1, rng, {t, 7, true});
  const auto ys = extract_subvolume(p.source, 7, 1), xs = extract_subvolume(p.target, 7, 1);
  const double m = tab.m(t);
  for (std::size_t k = 0; k < ex.target.data.size(); ++k) {
    EXPECT_DOUBLE_EQ(ex.x_t.stack.data[k], (1 - m) * xs.stack.data[k] + m * ys.stack.data[k]);
    EXPECT_DOUBLE_EQ(ex.target.data[k], m * (ys.stack.data[k] - xs.stack.data[k]));
  }
}

TEST(TrainingExampleTest, MonteCarloMoments) {
  const auto p = small_pair(8, 3);
  const auto pair = make_training_pair(p);
  const auto tab = build_schedule({});
  Rng rng(3);
  const int t = 400;
  const double m = tab.m(t);
  double sx = 0, sx0 = 0, sy = 0, r1 = 0, r2 = 0;
  std::size_t n = 0;
  for (int k = 0; k < 10000; ++k) {
    const auto ex = make_training_example(pair, tab, 1, rng, {t, std::nullopt, false});
    const auto xs = extract_subvolume(p.target, ex.x_t.center, 1), ys = extract_subvolume(p.source, ex.x_t.center, 1);
    for (std::size_t q = 0; q < ex.x_t.stack.data.size(); ++q) {
      const double x = ex.x_t.stack.data[q];
      sx += x;
      sx0 += xs.stack.data[q];
      sy += ys.stack.data[q];
      const double r = x - (1 - m) * xs.stack.data[q] - m * ys.stack.data[q];
      r1 += r;
      r2 += r * r;
      ++n;
    }
  }
  const double want = (1 - m) * sx0 / n + m * sy / n;
  EXPECT_LT(std::abs(sx / n - want) / want, 0.02);
  const double var = r2 / n - (r1 / n) * (r1 / n);
  EXPECT_LT(std::abs(var - tab.delta(t)) / tab.delta(t), 0.02);
}

TEST(TrainingExampleTest, DrawsCoverIndicesAndTimes) {
  const auto pair = make_training_pair(small_pair(8, 4));
  const auto tab = build_schedule({20, 1.0});
  Rng rng(4);
  std::set<std::size_t> is;
  std::set<int> ts;
  for (int k = 0; k < 2000; ++k) {
    const auto ex = make_training_example(pair, tab, 1, rng);
    is.insert(ex.x_t.center);
    ts.insert(ex.t);
  }
  EXPECT_EQ(is.size(), 8u);
  EXPECT_EQ(ts.size(), 20u);
  EXPECT_EQ(*ts.begin(), 1);
  EXPECT_EQ(*ts.rbegin(), 20);
}

TEST(TrainingLoss, OracleIsGlobalMinimiser) {
  const auto p = small_pair();
  const auto pair = make_training_pair(p);
  const auto tab = build_schedule({});
  OracleEstimator o(1);
  o.add(p.target);
  Rng rng(5);
  for (int k = 0; k < 50; ++k) {
    auto ex = make_training_example(pair, tab, 1, rng);
    ex.x_t.stack.id = p.target.id;
    const auto pred = o.predict_stack(ex.x_t);
    double sq = 0;
    for (std::size_t q = 0; q < pred.data.size(); ++q) sq += std::pow(pred.data[q] - ex.target.data[q], 2);
    EXPECT_LE(sq / pred.data.size(), 1e-10);
  }
}

TEST(Gradient, FiniteDifferenceSlice) {
  UNetArch a = tiny_arch(1, 4, true);
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

  auto params = net.params();
  std::vector<std::pair<nn::Param<double>*, std::size_t>> all;
  for (auto* p : params)
    for (std::size_t i = 0; i < p->size(); ++i) all.emplace_back(p, i);
  Rng pick(11);
  int checked = 0;
  while (checked < 10) {
    auto [p, i] = all[static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(all.size()) - 1))];
    if (std::abs(p->grad[i]) < 1e-7) continue;  // relative error is meaningless at zero
    const double o = p->value[i], h = 1e-6;
    p->value[i] = o + h;
    const double lp = loss();
    p->value[i] = o - h;
    const double lm = loss();
    p->value[i] = o;
    const double fd = (lp - lm) / (2 * h);
    EXPECT_LT(std::abs(fd - p->grad[i]) / std::max(std::abs(fd), std::abs(p->grad[i])), 1e-4) << p->name << "[" << i << "]";
    ++checked;
  }
}

TEST(Trainable, OutputShapeAndDeterminism) {
  const auto p = small_pair(8, 6);
  TrainableEstimator est(tiny_arch(1, 16), 1, 16, 1000, 3);
  const auto key = compute_style_key(p.target, 16);
  const auto xs = extract_subvolume(p.source, 3, 1), ys = extract_subvolume(p.source, 3, 1);
  const auto a = est.predict(xs, ys, key, 500), b = est.predict(xs, ys, key, 500);
  EXPECT_TRUE(a.same_shape(xs.stack));
  EXPECT_EQ(a.data, b.data);
  EXPECT_THROW(est.predict(xs, ys, compute_style_key(p.target, 8), 500), DimensionError);
}

TEST(Trainable, KeylessVariantIgnoresKey) {
  const auto p = small_pair(8, 6);
  TrainableEstimator est(tiny_arch(1, 16, false), 1, 16, 1000, 3);
  const auto xs = extract_subvolume(p.source, 3, 1);
  EXPECT_EQ(est.predict(xs, xs, compute_style_key(p.target, 16), 10).data,
            est.predict(xs, xs, compute_style_key(p.source, 16), 10).data);
}

TEST(Checkpoint, ZeroIterationsAndRoundTrip) {
  const auto p = small_pair(8, 7);
  const auto tab = build_schedule({});
  TrainableEstimator est(tiny_arch(1, 16), 1, 16, 1000, 9);
  const auto before = checkpoint::encode(est);
  TrainingConfig cfg;
  cfg.iterations = 0;
  const std::vector<TrainingPair> data{make_training_pair(p, 16)};
  const auto res = train(est, data, tab, cfg);
  EXPECT_TRUE(res.loss_curve.empty());
  EXPECT_EQ(checkpoint::encode(est), before);

  const auto loaded = checkpoint::decode(before);
  EXPECT_EQ(checkpoint::encode(*loaded.estimator), before);
  const auto key = compute_style_key(p.target, 16);
  const auto xs = extract_subvolume(p.source, 2, 1);
  EXPECT_EQ(loaded.estimator->predict(xs, xs, key, 77).data, est.predict(xs, xs, key, 77).data);
}

TEST(Checkpoint, MetadataAndErrors) {
  TrainableEstimator est(tiny_arch(2, 8), 2, 8, 500, 1);
  auto bytes = checkpoint::encode(est, {{"note", "x"}});
  const auto d = checkpoint::decode(bytes);
  EXPECT_EQ(d.descriptor.at("note"), "x");
  EXPECT_EQ(d.estimator->half_width(), 2u);
  EXPECT_EQ(d.estimator->T(), 500);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(checkpoint::decode(bad), FormatError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(checkpoint::decode(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(checkpoint::decode(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(checkpoint::decode(bad), FormatError);
}

TEST(Parametrization, OutputMapping) {
  const auto p = small_pair(8, 6);
  TrainableEstimator x0(tiny_arch(1, 16), 1, 16, 1000, 3, Parametrization::x0);
  TrainableEstimator eps(tiny_arch(1, 16), 1, 16, 1000, 3, Parametrization::eps);
  const auto key = compute_style_key(p.target, 16);
  const auto xs = extract_subvolume(p.source, 3, 1);
  const auto a = x0.predict(xs, xs, key, 200), b = eps.predict(xs, xs, key, 200);
  for (std::size_t k = 0; k < a.data.size(); ++k) EXPECT_DOUBLE_EQ(a.data[k], xs.stack.data[k] - b.data[k]);
  EXPECT_EQ(parse_parametrization("eps"), Parametrization::eps);
  EXPECT_THROW(parse_parametrization("v"), ParameterError);
}

// One small step against the accumulated gradient lowers the loss for both
// output meanings.
TEST(Parametrization, GradientPointsDownhill) {
  const auto tab = build_schedule({});
  const auto pair = make_training_pair(small_pair(8, 4), 16);
  for (auto param : {Parametrization::x0, Parametrization::eps}) {
    TrainableEstimator est(tiny_arch(1, 16), 1, 16, 1000, 5, param);
    Rng rng(3);
    const auto ex = make_training_example(pair, tab, 1, rng, {.t = 400});
    est.net().zero_grad();
    const double before = example_loss(est, ex, 1.0, 1.0, true);
    for (auto* q : est.net().params())
      for (std::size_t i = 0; i < q->size(); ++i) q->value[i] -= 1e-3f * q->grad[i];
    EXPECT_LT(example_loss(est, ex, 1.0, 1.0, false), before) << to_string(param);
  }
}

TEST(Parametrization, CheckpointKeepsIt) {
  TrainableEstimator est(tiny_arch(1, 8), 1, 8, 100, 1, Parametrization::eps);
  auto d = checkpoint::decode(checkpoint::encode(est));
  EXPECT_EQ(d.estimator->parametrization(), Parametrization::eps);
  EXPECT_EQ(d.descriptor.at("parametrization"), "eps");

  // Descriptors without the field predate it and mean eps.
  TrainableEstimator x0(tiny_arch(1, 8), 1, 8, 100, 1);
  auto bytes = checkpoint::encode(x0);
  const std::uint32_t L = rvol::get_u32(&bytes[8]);
  auto js = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + L);
  js.erase("parametrization");
  const std::string s = js.dump();
  std::vector<unsigned char> legacy(bytes.begin(), bytes.begin() + 8);
  rvol::put_u32(legacy, static_cast<std::uint32_t>(s.size()));
  legacy.insert(legacy.end(), s.begin(), s.end());
  legacy.insert(legacy.end(), bytes.begin() + 12 + L, bytes.end());
  EXPECT_EQ(checkpoint::decode(legacy).estimator->parametrization(), Parametrization::eps);
}

TEST(Training, RejectsBadSettings) {
  const auto tab = build_schedule({});
  TrainableEstimator est(tiny_arch(), 1, 16, 1000);
  const std::vector<TrainingPair> none;
  EXPECT_THROW(train(est, none, tab, {}), ParameterError);
  const std::vector<TrainingPair> one{make_training_pair(small_pair(8, 1), 16)};
  TrainingConfig c;
  c.lr = 0;
  EXPECT_THROW(train(est, one, tab, c), ParameterError);
  TrainableEstimator other(tiny_arch(), 1, 16, 500);
  EXPECT_THROW(train(other, one, tab, {}), ParameterError);
}

TEST(Training, DivergenceIsReported) {
  const auto tab = build_schedule({});
  TrainableEstimator est(tiny_arch(), 1, 16, 1000);
  const std::vector<TrainingPair> one{make_training_pair(small_pair(8, 1), 16)};
  TrainingConfig c;
  c.iterations = 200;
  c.batch_size = 2;
  c.lr = 1e30;
  EXPECT_THROW(train(est, one, tab, c), DivergenceError);
}

TEST(Training, OverfitSinglePair) {
  const auto p = small_pair(16, 12);
  const auto tab = build_schedule({});
  auto arch = TrainableEstimator::default_arch(1, 32, true);
  arch.base_width = 8;
  arch.groups = 4;
  arch.emb_dim = 32;
  TrainableEstimator est(arch, 1, 32, 1000, 2);
  const std::vector<TrainingPair> data{make_training_pair(p, 32)};
  TrainingConfig cfg;
  cfg.iterations = 600;
  cfg.batch_size = 8;
  cfg.lr = 3e-3;
  cfg.lr_final = 1e-4;
  const auto res = train(est, data, tab, cfg);
  auto head = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t k = a; k < b; ++k) s += res.loss_curve[k];
    return s / (b - a);
  };
  EXPECT_LT(head(580, 600), 0.1 * head(0, 5));
  const auto out = naive_sample(p.source, data[0].key, SamplerConfig::naive(50), est, tab);
  EXPECT_GT(ssim(out.x0_hat, p.target), 0.9);
}
