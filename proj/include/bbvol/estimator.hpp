#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbvol/error.hpp"
#include "bbvol/nn.hpp"
#include "bbvol/phantom.hpp"
#include "bbvol/rng.hpp"
#include "bbvol/schedule.hpp"
#include "bbvol/style_key.hpp"
#include "bbvol/unet.hpp"
#include "bbvol/volume.hpp"

namespace bbvol {

/// Predictor of the bridge direction m_t (Y - X0) + sqrt(delta_t) eps for a
/// (2N+1)-slice window. Implementations must be deterministic and safe to
/// call concurrently.
class NoiseEstimator {
 public:
  virtual ~NoiseEstimator() = default;

  virtual std::size_t half_width() const = 0;

  /// x_t and y are aligned windows (same centre) of the latent and source
  /// volumes. Returns a stack shaped like x_t.stack.
  virtual Volume predict(const SubVolume& x_t, const SubVolume& y, const StyleKey& key, int t) const = 0;
};

/// Shape-checked dispatch used by the samplers.
inline Volume predict_with_sourcecond(const NoiseEstimator& est, const SubVolume& x_t, const SubVolume& y,
                                      const StyleKey& key, int t) {
  if (!x_t.stack.same_shape(y.stack) || x_t.center != y.center)
    throw DimensionError("predict_with_sourcecond: latent and source windows are not aligned");
  if (x_t.half_width != est.half_width())
    throw DimensionError("predict_with_sourcecond: window half-width does not match the estimator");
  return est.predict(x_t, y, key, t);
}

// ---------------------------------------------------------------------------

/// The perfectly trained estimator: returns X_t^i - X0^i for the ground-truth
/// X0 registered under the latent's volume id.
class OracleEstimator final : public NoiseEstimator {
 public:
  explicit OracleEstimator(std::size_t half_width = 1) : N_(half_width) {}

  // Registers the target volume under id x0.id (the shared pair id).
  void add(const Volume& x0) { targets_[x0.id] = std::make_shared<const Volume>(x0); }

  std::size_t half_width() const override { return N_; }

  Volume predict_stack(const SubVolume& x_t) const {
    const auto it = targets_.find(x_t.stack.id);
    if (it == targets_.end()) throw LookupError("oracle: no ground truth registered for volume id " + hex64(x_t.stack.id));
    const Volume& x0 = *it->second;
    if (x0.H != x_t.stack.H || x0.W != x_t.stack.W || x_t.center >= x0.Z)
      throw DimensionError("oracle: window does not fit the registered volume");
    const auto ref = extract_subvolume(x0, x_t.center, x_t.half_width);
    Volume out = x_t.stack;
    for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] -= ref.stack.data[k];
    return out;
  }

  Volume predict(const SubVolume& x_t, const SubVolume&, const StyleKey&, int) const override {
    return predict_stack(x_t);
  }

 private:
  std::size_t N_;
  std::map<std::uint64_t, std::shared_ptr<const Volume>> targets_;
};

// ---------------------------------------------------------------------------

/// What the network output f stands for. `x0`: eps_hat = x_t - f, so the
/// loss is ||f - X0||^2. `eps`: eps_hat = f.
enum class Parametrization { eps, x0 };

inline const char* to_string(Parametrization p) { return p == Parametrization::eps ? "eps" : "x0"; }

inline Parametrization parse_parametrization(const std::string& s) {
  if (s == "eps") return Parametrization::eps;
  if (s == "x0") return Parametrization::x0;
  throw ParameterError("unknown parametrization '" + s + "' (expected eps or x0)");
}

/// Encoder-decoder estimator. Input channels are the 2N+1 latent slices
/// followed by the 2N+1 source slices.
class TrainableEstimator final : public NoiseEstimator {
 public:
  TrainableEstimator(const UNetArch& arch, std::size_t half_width, int bins, int T, std::uint64_t seed = 0,
                     Parametrization param = Parametrization::x0)
      : net_(arch, seed), N_(half_width), bins_(bins), T_(T), param_(param) {
    check();
  }

  TrainableEstimator(UNet<float> net, std::size_t half_width, int bins, int T,
                     Parametrization param = Parametrization::x0)
      : net_(std::move(net)), N_(half_width), bins_(bins), T_(T), param_(param) {
    check();
  }

  static UNetArch default_arch(std::size_t half_width = 1, int bins = kDefaultBins, bool use_style_key = true) {
    UNetArch a;
    a.in_channels = static_cast<int>(2 * (2 * half_width + 1));
    a.out_channels = static_cast<int>(2 * half_width + 1);
    a.key_dim = use_style_key ? 3 * bins : 0;
    return a;
  }

  std::size_t half_width() const override { return N_; }
  int bins() const { return bins_; }
  int T() const { return T_; }
  Parametrization parametrization() const { return param_; }
  bool uses_style_key() const { return net_.arch().key_dim > 0; }
  UNet<float>& net() { return net_; }
  const UNet<float>& net() const { return net_; }

  nn::Tensor<float> make_input(const SubVolume& x_t, const SubVolume& y) const {
    const std::size_t D = 2 * N_ + 1, hw = x_t.stack.slice_size();
    if (x_t.stack.Z != D || y.stack.Z != D) throw DimensionError("trainable estimator: window depth mismatch");
    nn::Tensor<float> in(2 * D, x_t.stack.H, x_t.stack.W);
    for (std::size_t k = 0; k < D * hw; ++k) {
      in.v[k] = static_cast<float>(x_t.stack.data[k]);
      in.v[D * hw + k] = static_cast<float>(y.stack.data[k]);
    }
    return in;
  }

  std::vector<float> make_key(const StyleKey& key) const {
    if (!uses_style_key()) return {};
    if (key.bins != bins_) throw DimensionError("trainable estimator: style key has " + std::to_string(key.bins) + " bins, expected " + std::to_string(bins_));
    const auto flat = key.flatten();
    return {flat.begin(), flat.end()};
  }

  Volume predict(const SubVolume& x_t, const SubVolume& y, const StyleKey& key, int t) const override {
    const auto out = net_.forward(make_input(x_t, y), static_cast<double>(t), make_key(key));
    Volume v(out.C, out.H, out.W);
    v.id = x_t.stack.id;
    for (std::size_t k = 0; k < v.data.size(); ++k) v.data[k] = to_eps(out.v[k], x_t.stack.data[k]);
    return v;
  }

  double to_eps(float f, double x_t) const { return param_ == Parametrization::x0 ? x_t - f : f; }

 private:
  void check() const {
    const auto& a = net_.arch();
    if (a.in_channels != static_cast<int>(2 * (2 * N_ + 1)) || a.out_channels != static_cast<int>(2 * N_ + 1))
      throw ParameterError("trainable estimator: channel counts do not match half width");
    if (a.key_dim != 0 && a.key_dim != 3 * bins_) throw ParameterError("trainable estimator: key_dim must be 3 * bins");
  }

  UNet<float> net_;
  std::size_t N_;
  int bins_;
  int T_;
  Parametrization param_;
};

// ---------------------------------------------------------------------------
// Training

/// A training volume pair with its precomputed style key.
struct TrainingPair {
  Volume x0;  // target modality
  Volume y;   // source modality
  StyleKey key;
};

inline TrainingPair make_training_pair(const PhantomPair& p, int bins = kDefaultBins) {
  return {p.target, p.source, compute_style_key(p.target, bins)};
}

struct TrainingExample {
  SubVolume x_t;
  SubVolume y;
  StyleKey key;
  int t = 0;
  Volume target;  // m_t (Y^i - X0^i) + sqrt(delta_t) eps
};

struct ExampleOptions {
  std::optional<int> t;                 // force the time step
  std::optional<std::size_t> index;     // force the slice index
  bool zero_noise = false;              // eps = 0
};

/// Draws slice index i, then t in [1, T], then eps (row-major over the stack).
inline TrainingExample make_training_example(const TrainingPair& pair, const ScheduleTable& tab, std::size_t N, Rng& rng,
                                             const ExampleOptions& opt = {}) {
  require_same_shape(pair.x0, pair.y, "make_training_example");
  const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pair.x0.Z) - 1));
  const int t_draw = static_cast<int>(rng.uniform_int(1, tab.T()));
  const std::size_t idx = opt.index.value_or(i);
  const int t = opt.t.value_or(t_draw);

  TrainingExample ex;
  ex.t = t;
  ex.key = pair.key;
  const auto x0 = extract_subvolume(pair.x0, idx, N);
  ex.y = extract_subvolume(pair.y, idx, N);
  ex.x_t = x0;
  ex.target = x0.stack;
  const double m = tab.m(t), sd = std::sqrt(tab.delta(t));
  for (std::size_t k = 0; k < x0.stack.data.size(); ++k) {
    const double eps = opt.zero_noise ? 0.0 : rng.normal();
    const double a = x0.stack.data[k], b = ex.y.stack.data[k];
    ex.x_t.stack.data[k] = (1 - m) * a + m * b + sd * eps;
    ex.target.data[k] = m * (b - a) + sd * eps;
  }
  return ex;
}

struct TrainingConfig {
  int batch_size = 16;
  int iterations = 1000;
  double lr = 1e-4;
  double lr_final = -1.0;  // < 0: constant; otherwise cosine decay to this value
  std::uint64_t seed = 0;
  bool weighted_loss = false;  // weight each example by c_eps(t)
  int log_every = 0;

  void validate() const {
    if (batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
    if (iterations < 0) throw ParameterError("train: iterations must be >= 0");
    if (!(lr > 0)) throw ParameterError("train: lr must be > 0");
  }
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss per iteration
  double seconds = 0.0;
};

inline double example_weight(const ScheduleTable& tab, int t, bool weighted) { return weighted ? tab.c_eps(t) : 1.0; }

/// Loss of one example and, if `grad` is set, accumulation of its gradient
/// scaled by 1/batch.
inline double example_loss(TrainableEstimator& est, const TrainingExample& ex, double weight, double scale,
                           bool grad) {
  auto& net = est.net();
  UNet<float>::Trace tr;
  const auto key = est.make_key(ex.key);
  const auto out = net.forward(est.make_input(ex.x_t, ex.y), ex.t, key, grad ? &tr : nullptr);
  const double n = static_cast<double>(out.v.size());
  double sq = 0.0;
  nn::Tensor<float> dout(out.C, out.H, out.W);
  for (std::size_t k = 0; k < out.v.size(); ++k) {
    const double d = est.to_eps(out.v[k], ex.x_t.stack.data[k]) - ex.target.data[k];
    const double sign = est.parametrization() == Parametrization::x0 ? -1.0 : 1.0;
    sq += d * d;
    dout.v[k] = static_cast<float>(sign * 2.0 * d * weight * scale / n);
  }
  if (grad) net.backward(dout, tr);
  return weight * sq / n;
}

/// Minimises E[w_t || target - eps_theta(X_t^i, key, t) ||^2] with Adam.
/// Examples are drawn round-robin over pairs with a single seeded stream.
inline TrainResult train(TrainableEstimator& est, std::span<const TrainingPair> data, const ScheduleTable& tab,
                         const TrainingConfig& cfg, const std::function<void(int, double)>& on_log = {}) {
  cfg.validate();
  if (data.empty()) throw ParameterError("train: empty dataset");
  if (est.T() != tab.T()) throw ParameterError("train: estimator and schedule disagree on T");
  TrainResult res;
  const auto start = std::chrono::steady_clock::now();
  Rng rng(mix_seed(cfg.seed ^ 0x747261696eULL));
  nn::Adam<float> opt(cfg.lr);
  auto params = est.net().params();

  for (int it = 0; it < cfg.iterations; ++it) {
    if (cfg.lr_final >= 0 && cfg.iterations > 1) {
      const double p = static_cast<double>(it) / (cfg.iterations - 1);
      opt.set_lr(cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + std::cos(3.141592653589793 * p)));
    }
    est.net().zero_grad();
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& pair = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
      const auto ex = make_training_example(pair, tab, est.half_width(), rng);
      batch_loss += example_loss(est, ex, example_weight(tab, ex.t, cfg.weighted_loss), 1.0 / cfg.batch_size, true);
    }
    batch_loss /= cfg.batch_size;
    if (!std::isfinite(batch_loss))
      throw DivergenceError("train: non-finite loss at iteration " + std::to_string(it) + " (lr " +
                            std::to_string(opt.lr()) + ", last loss " +
                            (res.loss_curve.empty() ? std::string("n/a") : std::to_string(res.loss_curve.back())) + ")");
    for (auto* p : params)
      for (float g : p->grad)
        if (!std::isfinite(g)) throw DivergenceError("train: non-finite gradient in " + p->name + " at iteration " + std::to_string(it));
    opt.step(params);
    res.loss_curve.push_back(batch_loss);
    if (on_log && cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations)) on_log(it, batch_loss);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint "BVCK"
//
//   offset  size  field
//   0       4     magic "BVCK"
//   4       4     version (u32 LE) = 1
//   8       4     descriptor length L (u32 LE)
//   12      L     JSON descriptor (UTF-8): arch, half_width, bins, T, extra metadata
//   12+L    8     parameter count P (u64 LE)
//   20+L    4P    float32 LE parameters in UNet::params() order

namespace checkpoint {

inline constexpr unsigned char kMagic[4] = {'B', 'V', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

inline std::vector<unsigned char> encode(TrainableEstimator& est, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json d = meta;
  d["arch"] = to_json(est.net().arch());
  d["half_width"] = est.half_width();
  d["bins"] = est.bins();
  d["T"] = est.T();
  d["parametrization"] = to_string(est.parametrization());
  const std::string js = d.dump();
  std::vector<unsigned char> b(kMagic, kMagic + 4);
  rvol::put_u32(b, kVersion);
  rvol::put_u32(b, static_cast<std::uint32_t>(js.size()));
  b.insert(b.end(), js.begin(), js.end());
  const auto params = est.net().params();
  std::uint64_t count = 0;
  for (auto* p : params) count += p->size();
  rvol::put_u32(b, static_cast<std::uint32_t>(count));
  rvol::put_u32(b, static_cast<std::uint32_t>(count >> 32));
  for (auto* p : params)
    for (float f : p->value) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      rvol::put_u32(b, bits);
    }
  return b;
}

struct Loaded {
  std::unique_ptr<TrainableEstimator> estimator;
  nlohmann::json descriptor;
};

inline Loaded decode(std::span<const unsigned char> b) {
  if (b.size() < 12) throw FormatError("checkpoint: truncated header", b.size());
  for (std::size_t k = 0; k < 4; ++k)
    if (b[k] != kMagic[k]) throw FormatError("checkpoint: bad magic", k);
  const std::uint32_t version = rvol::get_u32(&b[4]);
  if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  const std::uint32_t L = rvol::get_u32(&b[8]);
  if (b.size() < 12ull + L + 8) throw FormatError("checkpoint: truncated descriptor", b.size());
  auto d = nlohmann::json::parse(b.begin() + 12, b.begin() + 12 + L, nullptr, false);
  if (d.is_discarded() || !d.is_object()) throw FormatError("checkpoint: descriptor is not a JSON object", 12);
  UNetArch arch;
  std::size_t N = 0;
  int bins = 0, T = 0;
  Parametrization param = Parametrization::eps;
  try {
    arch = unet_arch_from_json(d.at("arch"));
    N = d.at("half_width").get<std::size_t>();
    bins = d.at("bins").get<int>();
    T = d.at("T").get<int>();
    if (d.contains("parametrization")) param = parse_parametrization(d.at("parametrization").get<std::string>());
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: bad descriptor: ") + e.what(), 12);
  }
  const std::size_t poff = 12 + L;
  const std::uint64_t count = std::uint64_t{rvol::get_u32(&b[poff])} | std::uint64_t{rvol::get_u32(&b[poff + 4])} << 32;
  auto est = std::make_unique<TrainableEstimator>(arch, N, bins, T, 0, param);
  auto params = est->net().params();
  std::uint64_t expect = 0;
  for (auto* p : params) expect += p->size();
  if (count != expect)
    throw FormatError("checkpoint: parameter count " + std::to_string(count) + " does not match architecture (" +
                          std::to_string(expect) + ")",
                      poff);
  const std::size_t need = poff + 8 + 4 * count;
  if (b.size() < need) throw FormatError("checkpoint: truncated parameter payload", b.size());
  if (b.size() > need) throw FormatError("checkpoint: trailing bytes", need);
  std::size_t off = poff + 8;
  for (auto* p : params)
    for (float& f : p->value) {
      const std::uint32_t bits = rvol::get_u32(&b[off]);
      std::memcpy(&f, &bits, 4);
      if (!std::isfinite(f)) throw FormatError("checkpoint: non-finite parameter", off);
      off += 4;
    }
  return {std::move(est), std::move(d)};
}

}  // namespace checkpoint

inline void save_checkpoint(TrainableEstimator& est, const std::filesystem::path& path,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  write_file_bytes(path, checkpoint::encode(est, meta));
}

inline checkpoint::Loaded load_checkpoint(const std::filesystem::path& path) {
  return checkpoint::decode(read_file_bytes(path));
}

}  // namespace bbvol
