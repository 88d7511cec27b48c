#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbvol/error.hpp"
#include "bbvol/nn.hpp"
#include "bbvol/rng.hpp"

namespace bbvol {

/// Shape of the encoder-decoder. key_dim == 0 builds the unconditioned
/// ("pure") variant without the style-key branch.
struct UNetArch {
  int in_channels = 6;
  int out_channels = 3;
  int base_width = 32;
  int levels = 3;
  int groups = 8;
  int emb_dim = 128;
  int key_dim = 384;

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw ParameterError("unet: channel counts must be positive");
    if (base_width < 1 || levels < 1 || levels > 6) throw ParameterError("unet: invalid width/levels");
    if (groups < 1 || base_width % groups != 0) throw ParameterError("unet: base_width must be divisible by groups");
    if (emb_dim < 2 || emb_dim % 2 != 0) throw ParameterError("unet: emb_dim must be even");
    if (key_dim < 0) throw ParameterError("unet: key_dim must be >= 0");
  }

  // Spatial sizes must be divisible by this.
  std::size_t spatial_multiple() const { return std::size_t{1} << (levels - 1); }

  bool operator==(const UNetArch&) const = default;
};

inline nlohmann::json to_json(const UNetArch& a) {
  return {{"in_channels", a.in_channels}, {"out_channels", a.out_channels}, {"base_width", a.base_width},
          {"levels", a.levels},           {"groups", a.groups},             {"emb_dim", a.emb_dim},
          {"key_dim", a.key_dim}};
}

inline UNetArch unet_arch_from_json(const nlohmann::json& j) {
  UNetArch a;
  a.in_channels = j.at("in_channels").get<int>();
  a.out_channels = j.at("out_channels").get<int>();
  a.base_width = j.at("base_width").get<int>();
  a.levels = j.at("levels").get<int>();
  a.groups = j.at("groups").get<int>();
  a.emb_dim = j.at("emb_dim").get<int>();
  a.key_dim = j.at("key_dim").get<int>();
  a.validate();
  return a;
}

namespace detail {

// conv3x3 -> + proj(silu(emb)) per channel -> GroupNorm -> SiLU
template <class T>
class EmbBlock {
 public:
  struct Cache {
    typename nn::Conv2d<T>::Cache conv;
    typename nn::GroupNorm<T>::Cache gn;
    nn::Tensor<T> pre_act;
  };

  EmbBlock() = default;
  EmbBlock(const std::string& name, std::size_t cin, std::size_t cout, std::size_t groups, std::size_t emb)
      : conv_(name + ".conv", cin, cout, 3), proj_(name + ".emb", emb, cout), gn_(name + ".norm", cout, groups) {}

  void init(Rng& rng) {
    conv_.init(rng);
    proj_.init(rng);
  }

  nn::Tensor<T> forward(const nn::Tensor<T>& x, std::span<const T> semb, Cache* c) const {
    auto h = conv_.forward(x, c ? &c->conv : nullptr);
    const auto p = proj_.forward(semb);
    for (std::size_t ch = 0; ch < h.C; ++ch) {
      T* row = h.channel(ch);
      for (std::size_t i = 0; i < h.plane(); ++i) row[i] += p[ch];
    }
    auto g = gn_.forward(h, c ? &c->gn : nullptr);
    nn::Tensor<T> y(g.C, g.H, g.W);
    y.v = nn::silu<T>(g.v);
    if (c) c->pre_act = std::move(g);
    return y;
  }

  nn::Tensor<T> backward(const nn::Tensor<T>& dy, const Cache& c, std::span<const T> semb, std::vector<T>& dsemb) {
    nn::Tensor<T> dg(dy.C, dy.H, dy.W);
    dg.v = nn::silu_backward<T>(dy.v, c.pre_act.v);
    auto dh = gn_.backward(dg, c.gn);
    std::vector<T> dp(dh.C, T(0));
    for (std::size_t ch = 0; ch < dh.C; ++ch) {
      const T* row = dh.channel(ch);
      T acc = 0;
      for (std::size_t i = 0; i < dh.plane(); ++i) acc += row[i];
      dp[ch] = acc;
    }
    const auto ds = proj_.backward(dp, semb);
    for (std::size_t i = 0; i < ds.size(); ++i) dsemb[i] += ds[i];
    return conv_.backward(dh, c.conv, dh.H, dh.W);
  }

  void collect(std::vector<nn::Param<T>*>& out) {
    for (auto* p : conv_.params()) out.push_back(p);
    for (auto* p : proj_.params()) out.push_back(p);
    for (auto* p : gn_.params()) out.push_back(p);
  }

 private:
  nn::Conv2d<T> conv_;
  nn::Linear<T> proj_;
  nn::GroupNorm<T> gn_;
};

}  // namespace detail

/// Encoder-decoder with skip connections. Widths double per level; each level
/// has two embedding-conditioned conv blocks. The conditioning vector is
/// mlp_t(sinusoid(t)) + mlp_key(key), injected into every block.
template <class T>
class UNet {
 public:
  // Activations kept by a training forward pass.
  struct Trace {
    std::vector<T> t_sin, t_h1, k_in, k_h1, emb, semb;
    std::vector<std::vector<typename detail::EmbBlock<T>::Cache>> enc, dec;
    std::vector<std::pair<std::size_t, std::size_t>> enc_hw, dec_hw;
    typename nn::Conv2d<T>::Cache out;
    std::size_t H = 0, W = 0;
  };

  UNet() = default;
  explicit UNet(const UNetArch& a, std::uint64_t seed = 0) : arch_(a) {
    a.validate();
    const std::size_t E = static_cast<std::size_t>(a.emb_dim);
    const std::size_t G = static_cast<std::size_t>(a.groups);
    t_fc1_ = nn::Linear<T>("time.fc1", E, E);
    t_fc2_ = nn::Linear<T>("time.fc2", E, E);
    if (a.key_dim > 0) {
      k_fc1_ = nn::Linear<T>("key.fc1", static_cast<std::size_t>(a.key_dim), E);
      k_fc2_ = nn::Linear<T>("key.fc2", E, E);
    }
    const auto width = [&](int l) { return static_cast<std::size_t>(a.base_width) << l; };
    std::size_t cin = static_cast<std::size_t>(a.in_channels);
    for (int l = 0; l < a.levels; ++l) {
      const std::string n = "enc" + std::to_string(l);
      enc_.push_back({detail::EmbBlock<T>(n + ".0", cin, width(l), G, E),
                      detail::EmbBlock<T>(n + ".1", width(l), width(l), G, E)});
      cin = width(l);
    }
    for (int l = 0; l + 1 < a.levels; ++l) {
      const std::string n = "dec" + std::to_string(l);
      dec_.push_back({detail::EmbBlock<T>(n + ".0", width(l + 1) + width(l), width(l), G, E),
                      detail::EmbBlock<T>(n + ".1", width(l), width(l), G, E)});
    }
    out_ = nn::Conv2d<T>("out", width(0), static_cast<std::size_t>(a.out_channels), 1);

    Rng rng(mix_seed(seed));
    t_fc1_.init(rng);
    t_fc2_.init(rng);
    if (a.key_dim > 0) {
      k_fc1_.init(rng);
      k_fc2_.init(rng);
    }
    for (auto& lvl : enc_)
      for (auto& b : lvl) b.init(rng);
    for (auto& lvl : dec_)
      for (auto& b : lvl) b.init(rng);
    out_.init(rng);
  }

  const UNetArch& arch() const { return arch_; }

  std::vector<nn::Param<T>*> params() {
    std::vector<nn::Param<T>*> ps;
    for (auto* p : t_fc1_.params()) ps.push_back(p);
    for (auto* p : t_fc2_.params()) ps.push_back(p);
    if (arch_.key_dim > 0) {
      for (auto* p : k_fc1_.params()) ps.push_back(p);
      for (auto* p : k_fc2_.params()) ps.push_back(p);
    }
    for (auto& lvl : enc_)
      for (auto& b : lvl) b.collect(ps);
    for (auto& lvl : dec_)
      for (auto& b : lvl) b.collect(ps);
    for (auto* p : out_.params()) ps.push_back(p);
    return ps;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  nn::Tensor<T> forward(const nn::Tensor<T>& x, double t, std::span<const T> key, Trace* tr = nullptr) const {
    if (x.C != static_cast<std::size_t>(arch_.in_channels)) throw DimensionError("unet: input channel mismatch");
    const std::size_t mult = arch_.spatial_multiple();
    if (x.H % mult || x.W % mult)
      throw DimensionError("unet: spatial size must be a multiple of " + std::to_string(mult));
    if (arch_.key_dim > 0 && key.size() != static_cast<std::size_t>(arch_.key_dim))
      throw DimensionError("unet: style key length " + std::to_string(key.size()) + " != " +
                           std::to_string(arch_.key_dim));
    Trace local;
    Trace& c = tr ? *tr : local;
    const bool keep = tr != nullptr;
    c.H = x.H;
    c.W = x.W;

    c.t_sin = nn::timestep_embedding<T>(t, static_cast<std::size_t>(arch_.emb_dim));
    c.t_h1 = t_fc1_.forward(c.t_sin);
    c.emb = t_fc2_.forward(nn::silu<T>(c.t_h1));
    if (arch_.key_dim > 0) {
      c.k_in.assign(key.begin(), key.end());
      c.k_h1 = k_fc1_.forward(c.k_in);
      const auto ke = k_fc2_.forward(nn::silu<T>(c.k_h1));
      for (std::size_t i = 0; i < ke.size(); ++i) c.emb[i] += ke[i];
    }
    c.semb = nn::silu<T>(c.emb);

    c.enc.assign(enc_.size(), std::vector<typename detail::EmbBlock<T>::Cache>(2));
    c.dec.assign(dec_.size(), std::vector<typename detail::EmbBlock<T>::Cache>(2));
    c.enc_hw.assign(enc_.size(), {});
    c.dec_hw.assign(dec_.size(), {});

    std::vector<nn::Tensor<T>> skips(enc_.size());
    nn::Tensor<T> h = x;
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      if (l > 0) h = nn::avg_pool2(h);
      c.enc_hw[l] = {h.H, h.W};
      h = enc_[l][0].forward(h, c.semb, keep ? &c.enc[l][0] : nullptr);
      h = enc_[l][1].forward(h, c.semb, keep ? &c.enc[l][1] : nullptr);
      skips[l] = h;
    }
    for (std::size_t l = dec_.size(); l-- > 0;) {
      h = nn::concat_channels(nn::upsample2(h), skips[l]);
      c.dec_hw[l] = {h.H, h.W};
      h = dec_[l][0].forward(h, c.semb, keep ? &c.dec[l][0] : nullptr);
      h = dec_[l][1].forward(h, c.semb, keep ? &c.dec[l][1] : nullptr);
    }
    return out_.forward(h, keep ? &c.out : nullptr);
  }

  // Accumulates dL/dparams for the forward pass recorded in `tr`.
  void backward(const nn::Tensor<T>& dout, const Trace& tr) {
    std::vector<T> dsemb(tr.semb.size(), T(0));
    nn::Tensor<T> d = out_.backward(dout, tr.out, tr.H, tr.W);

    std::vector<nn::Tensor<T>> dskip(enc_.size());
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      d = dec_[l][1].backward(d, tr.dec[l][1], tr.semb, dsemb);
      d = dec_[l][0].backward(d, tr.dec[l][0], tr.semb, dsemb);
      const std::size_t up_c = static_cast<std::size_t>(arch_.base_width) << (l + 1);
      auto [dup, ds] = nn::split_channels(d, up_c);
      dskip[l] = std::move(ds);
      d = nn::upsample2_backward(dup);
    }
    for (std::size_t l = enc_.size(); l-- > 0;) {
      if (l + 1 < enc_.size())
        for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] += dskip[l].v[i];
      d = enc_[l][1].backward(d, tr.enc[l][1], tr.semb, dsemb);
      d = enc_[l][0].backward(d, tr.enc[l][0], tr.semb, dsemb);
      if (l > 0) d = nn::avg_pool2_backward(d);
    }

    const auto demb = nn::silu_backward<T>(dsemb, tr.emb);
    {
      const auto a1 = nn::silu<T>(tr.t_h1);
      const auto da1 = t_fc2_.backward(demb, a1);
      t_fc1_.backward(nn::silu_backward<T>(da1, tr.t_h1), tr.t_sin);
    }
    if (arch_.key_dim > 0) {
      const auto a1 = nn::silu<T>(tr.k_h1);
      const auto da1 = k_fc2_.backward(demb, a1);
      k_fc1_.backward(nn::silu_backward<T>(da1, tr.k_h1), tr.k_in);
    }
  }

 private:
  UNetArch arch_;
  nn::Linear<T> t_fc1_, t_fc2_, k_fc1_, k_fc2_;
  std::vector<std::vector<detail::EmbBlock<T>>> enc_, dec_;
  nn::Conv2d<T> out_;
};

}  // namespace bbvol
