#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bbvol/error.hpp"
#include "bbvol/rng.hpp"
#include "bbvol/volume.hpp"

namespace bbvol {

/// Target-only intensity style: v -> clip(offset + contrast * v^gamma, 0, 1).
struct StyleParams {
  double gamma = 1.0;
  double contrast = 1.0;
  double offset = 0.0;

  double apply(double v) const { return std::clamp(offset + contrast * std::pow(v, gamma), 0.0, 1.0); }

  bool operator==(const StyleParams&) const = default;
};

struct PhantomConfig {
  std::size_t Z = 32, H = 32, W = 32;
  int n_shells = 3;
  StyleParams style;
  double noise_sigma = 0.02;
  std::uint64_t seed = 42;

  void validate() const {
    if (Z < 8 || H < 8 || W < 8) throw ParameterError("phantom: every axis must be at least 8 voxels");
    if (n_shells < 1) throw ParameterError("phantom: n_shells must be >= 1");
    if (!(style.gamma > 0.0)) throw ParameterError("phantom: gamma must be > 0");
    if (!(style.contrast > 0.0 && style.contrast <= 1.0)) throw ParameterError("phantom: contrast must lie in (0, 1]");
    if (!std::isfinite(style.offset)) throw ParameterError("phantom: offset must be finite");
    if (!(noise_sigma >= 0.0)) throw ParameterError("phantom: noise_sigma must be >= 0");
  }
};

struct PhantomPair {
  Volume source;  // CT-like
  Volume target;  // MRI-like, carries the style
};

namespace detail {

struct Ellipsoid {
  double cz, cy, cx;  // centre, voxel units
  double rz, ry, rx;  // semi-axes, voxel units

  // Normalised radius; < 1 inside.
  double radius(double z, double y, double x) const {
    const double dz = (z - cz) / rz, dy = (y - cy) / ry, dx = (x - cx) / rx;
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  }
};

struct Geometry {
  Ellipsoid head;
  std::vector<Ellipsoid> lesions;
};

inline Geometry sample_geometry(const PhantomConfig& c) {
  Rng rng(mix_seed(c.seed));
  const double Z = static_cast<double>(c.Z), H = static_cast<double>(c.H), W = static_cast<double>(c.W);
  Geometry g;
  // The head is elongated along z beyond the field of view, like a cropped scan.
  g.head = {(Z - 1) / 2 + rng.uniform(-0.04, 0.04) * Z, (H - 1) / 2 + rng.uniform(-0.04, 0.04) * H,
            (W - 1) / 2 + rng.uniform(-0.04, 0.04) * W, rng.uniform(0.62, 0.80) * Z,
            rng.uniform(0.36, 0.44) * H, rng.uniform(0.30, 0.40) * W};
  const auto n_lesions = rng.uniform_int(2, 3);
  for (std::int64_t l = 0; l < n_lesions; ++l) {
    // Centre at normalised head radius <= 0.55 along a random direction.
    const double u = rng.uniform(-1, 1), phi = rng.uniform(0, 6.283185307179586), rad = rng.uniform(0.15, 0.55);
    const double s = std::sqrt(1 - u * u);
    Ellipsoid e;
    e.cz = g.head.cz + rad * u * std::min(g.head.rz, 0.45 * Z);
    e.cy = g.head.cy + rad * s * std::cos(phi) * g.head.ry;
    e.cx = g.head.cx + rad * s * std::sin(phi) * g.head.rx;
    e.rz = rng.uniform(0.08, 0.16) * Z;
    e.ry = rng.uniform(0.07, 0.14) * H;
    e.rx = rng.uniform(0.07, 0.14) * W;
    g.lesions.push_back(e);
  }
  return g;
}

inline double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

// Canonical tissue intensities of shell k (0 = outermost) at in-shell depth u in [0,1).
inline double source_level(int k, int n, double u) {
  if (k == 0) return 0.80 + 0.12 * u;                                   // bone rim
  return 0.30 + 0.10 * static_cast<double>(k) / n + 0.05 * (u - 0.5);   // low soft-tissue contrast
}

inline double target_level(int k, int n, double u) {
  if (k == 0) return 0.08 + 0.06 * u;                                   // dark rim
  return 0.30 + 0.50 * static_cast<double>(k) / n + 0.12 * (u - 0.5);   // graded soft tissue
}

}  // namespace detail

/// Paired CT-like / MRI-like volumes over shared nested-ellipsoid geometry.
///
/// Both outputs are min-max normalised and rounded to float32. Geometry and
/// noise depend on the seed only; the style touches the target only.
inline PhantomPair generate_pair(const PhantomConfig& c) {
  c.validate();
  const auto g = detail::sample_geometry(c);
  Volume src(c.Z, c.H, c.W), tgt(c.Z, c.H, c.W);
  const int n = c.n_shells;

  for (std::size_t z = 0; z < c.Z; ++z)
    for (std::size_t y = 0; y < c.H; ++y)
      for (std::size_t x = 0; x < c.W; ++x) {
        const double zd = static_cast<double>(z), yd = static_cast<double>(y), xd = static_cast<double>(x);
        const double r = g.head.radius(zd, yd, xd);
        if (r >= 1.0) continue;
        const double depth = (1.0 - r) * n;
        const int k = std::min(n - 1, static_cast<int>(depth));
        const double u = std::min(depth - k, 1.0);
        double s = detail::source_level(k, n, u);
        double t = detail::target_level(k, n, u);
        for (const auto& les : g.lesions) {
          const double w = 1.0 - detail::smoothstep(0.7, 1.0, les.radius(zd, yd, xd));
          s = (1 - w) * s + w * 0.22;
          t = (1 - w) * t + w * 0.97;
        }
        src.at(z, y, x) = s;
        tgt.at(z, y, x) = t;
      }

  if (c.noise_sigma > 0) {
    Rng noise(mix_seed(c.seed ^ 0x6e6f697365ULL));
    for (double& v : src.data) v += c.noise_sigma * noise.normal();
  }
  for (double& v : tgt.data) v = c.style.apply(v);

  PhantomPair p{min_max_normalize(src).volume, min_max_normalize(tgt).volume};
  quantize_float32(p.source);
  quantize_float32(p.target);
  p.source.id = p.target.id = mix_seed(c.seed);
  return p;
}

/// Style distribution for datasets: log-uniform gamma in [0.5, 2], contrast
/// in [0.7, 1], offset in [0, 0.3].
inline StyleParams sample_style(Rng& rng) {
  StyleParams s;
  s.gamma = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
  s.contrast = rng.uniform(0.7, 1.0);
  s.offset = rng.uniform(0.0, 0.3);
  return s;
}

struct DatasetEntry {
  PhantomConfig config;  // geometry seed and the drawn style
  PhantomPair pair;
};

/// n pairs; entry j uses geometry seed base.seed + j and a style drawn from
/// a generator seeded by style_seed.
inline std::vector<DatasetEntry> generate_dataset(std::size_t n, const PhantomConfig& base, std::uint64_t style_seed) {
  if (n < 1) throw ParameterError("generate_dataset: n must be >= 1");
  Rng styles(style_seed);
  std::vector<DatasetEntry> out;
  out.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    PhantomConfig c = base;
    c.seed = base.seed + j;
    c.style = sample_style(styles);
    out.push_back({c, generate_pair(c)});
  }
  return out;
}

}  // namespace bbvol
