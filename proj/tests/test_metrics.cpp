#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bbvol/metrics.hpp"
#include "bbvol/phantom.hpp"
#include "bbvol/rng.hpp"
#include "support/metric_oracles.hpp"

using namespace bbvol;
using namespace bbvol::oracle;

TEST(MetricsOracle, RandomCubesMatchBruteForce) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto a = random_volume(8, 8, 8, seed), b = random_volume(8, 8, 8, seed + 100);
    EXPECT_NEAR(ssim(a, b), brute_ssim(a, b), 1e-8);
    EXPECT_NEAR(psnr(a, b), brute_psnr(a, b), 1e-8);
    EXPECT_NEAR(nrmse(a, b), brute_nrmse(a, b), 1e-8);
    EXPECT_TRUE(ssim_detailed(a, b).fallback);
  }
}

TEST(MetricsOracle, WindowedPathMatchesBruteForce) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto a = random_volume(3, 14, 17, seed);
    auto b = a;
    Rng rng(seed + 7);
    for (double& x : b.data) x = std::clamp(x + 0.2 * rng.normal(), 0.0, 1.0);
    EXPECT_NEAR(ssim(a, b), brute_ssim(a, b), 1e-8);
    EXPECT_FALSE(ssim_detailed(a, b).fallback);
  }
}

TEST(Nrmse, Examples) {
  const auto b = random_volume(4, 5, 6, 3);
  EXPECT_EQ(nrmse(b, b), 0.0);
  auto c = b;
  c.data[0] = 0.0;
  c.data[1] = 1.0;  // pin the range to exactly [0, 1]
  auto up = c, down = c;
  for (double& x : up.data) x += 0.1;
  for (double& x : down.data) x -= 0.1;
  EXPECT_NEAR(nrmse(up, c), 0.1, 1e-12);
  EXPECT_NEAR(nrmse(up, c), nrmse(down, c), 1e-12);
  EXPECT_TRUE(nrmse_detailed(c, Volume(4, 5, 6, 0.3)).constant_reference);
  EXPECT_THROW(nrmse(c, Volume(1, 1, 1)), DimensionError);
}

TEST(Psnr, Examples) {
  const auto a = random_volume(2, 3, 4, 1);
  EXPECT_EQ(psnr(a, a), 200.0);
  Volume z(1, 10, 10, 0.0), p(1, 10, 10, 0.1), one(1, 10, 10, 1.0);
  EXPECT_NEAR(psnr(p, z), 20.0, 1e-12);
  EXPECT_NEAR(psnr(one, z), 0.0, 1e-12);
}

TEST(Ssim, Examples) {
  const auto a = random_volume(3, 16, 16, 2);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-15);
  Volume c(2, 16, 16, 0.4);
  EXPECT_NEAR(ssim(c, c), 1.0, 1e-15);

  PhantomConfig cfg;
  cfg.Z = cfg.H = cfg.W = 24;
  const auto pr = generate_pair(cfg);
  auto inv = pr.target;
  for (double& x : inv.data) x = 1.0 - x;
  EXPECT_LT(ssim(inv, pr.target), 0.5);
}

TEST(SliceConsistencyTest, Examples) {
  Volume flat(5, 12, 12);
  Rng rng(1);
  for (std::size_t h = 0; h < 12; ++h)
    for (std::size_t w = 0; w < 12; ++w) {
      const double v = rng.uniform();
      for (std::size_t z = 0; z < 5; ++z) flat.at(z, h, w) = v;
    }
  const auto f = slice_consistency_detailed(flat);
  EXPECT_EQ(f.mean_profile_tv, 0.0);
  EXPECT_NEAR(f.adjacent_ssim_term, 0.0, 1e-15);

  Volume alt(4, 3, 3);
  for (std::size_t z = 0; z < 4; ++z)
    for (double& x : alt.slice(z)) x = static_cast<double>(z % 2);
  EXPECT_DOUBLE_EQ(slice_consistency_detailed(alt).mean_profile_tv, 3.0);
  EXPECT_THROW(slice_consistency(Volume(1, 4, 4)), ParameterError);
}

TEST(SliceConsistencyTest, PhantomBeatsShuffledCopies) {
  PhantomConfig cfg;
  cfg.Z = cfg.H = cfg.W = 24;
  const auto v = generate_pair(cfg).target;
  const double base = slice_consistency(v);
  std::vector<std::size_t> order(v.Z);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 g(4);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(order.begin(), order.end(), g);
    Volume s(v.Z, v.H, v.W);
    for (std::size_t z = 0; z < v.Z; ++z) std::copy(v.slice(order[z]).begin(), v.slice(order[z]).end(), s.slice(z).begin());
    EXPECT_LT(base, slice_consistency(s));
  }
}

TEST(SliceConsistencyTest, MeanTermInvariantUnderInSlicePermutation) {
  const auto v = random_volume(6, 9, 9, 11);
  std::vector<std::size_t> perm(81);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
  Volume p(6, 9, 9);
  for (std::size_t z = 0; z < 6; ++z)
    for (std::size_t k = 0; k < 81; ++k) p.slice(z)[k] = v.slice(z)[perm[k]];
  EXPECT_NEAR(slice_consistency_detailed(p).mean_profile_tv, slice_consistency_detailed(v).mean_profile_tv, 1e-14);
}

TEST(Evaluate, IdenticalInputs) {
  PhantomConfig cfg;
  cfg.Z = cfg.H = cfg.W = 16;
  const auto v = generate_pair(cfg).target;
  const auto r = evaluate(v, v);
  EXPECT_EQ(r.nrmse, 0.0);
  EXPECT_EQ(r.psnr, 200.0);
  EXPECT_NEAR(r.ssim, 1.0, 1e-15);
  EXPECT_EQ(r.histogram_w1, 0.0);
  EXPECT_EQ(r.slice_consistency, r.slice_consistency_reference);
}

TEST(Evaluate, JsonRoundTripExact) {
  PhantomConfig cfg;
  cfg.Z = cfg.H = cfg.W = 16;
  const auto p = generate_pair(cfg);
  auto r = evaluate(p.source, p.target);
  r.config_hash = "0123456789abcdef";
  const auto back = eval_report_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(back, r);
  EXPECT_EQ(to_json(r).at("schema"), "bbvol.eval_report");
}
