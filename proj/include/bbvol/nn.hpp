#pragma once

// Minimal float/double layer kit with explicit backward passes. Every layer
// works on one sample (C x H x W); batching is a loop in the caller, which
// keeps the floating-point reduction order independent of batch size and of
// how work is split across threads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "bbvol/error.hpp"
#include "bbvol/rng.hpp"

namespace bbvol::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
struct Tensor {
  std::size_t C = 0, H = 0, W = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(std::size_t c, std::size_t h, std::size_t w, T fill = T(0)) : C(c), H(h), W(w), v(c * h * w, fill) {}

  std::size_t plane() const { return H * W; }
  T* channel(std::size_t c) { return v.data() + c * H * W; }
  const T* channel(std::size_t c) const { return v.data() + c * H * W; }
};

template <class T>
struct Param {
  std::string name;
  std::vector<T> value, grad;

  explicit Param(std::string n = {}, std::size_t size = 0) : name(std::move(n)), value(size), grad(size) {}
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
inline void init_uniform(Param<T>& p, double bound, Rng& rng) {
  for (auto& x : p.value) x = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// ---------------------------------------------------------------------------

template <class T>
class Conv2d {
 public:
  struct Cache {
    std::vector<T> col;  // K x HW patches (3x3) or unused (1x1)
    Tensor<T> input;     // kept for 1x1
  };

  Conv2d() = default;
  Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t k)
      : cin_(cin), cout_(cout), k_(k), weight_(name + ".weight", cout * cin * k * k), bias_(name + ".bias", cout) {
    if (k != 1 && k != 3) throw ParameterError("Conv2d: kernel must be 1 or 3");
  }

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin_ * k_ * k_));
    init_uniform(weight_, bound, rng);
    init_uniform(bias_, bound, rng);
  }

  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (x.C != cin_) throw DimensionError("Conv2d: channel mismatch");
    const std::size_t hw = x.plane();
    const std::size_t K = cin_ * k_ * k_;
    Tensor<T> y(cout_, x.H, x.W);
    CMatMap<T> Wm(weight_.value.data(), cout_, K);
    MatMap<T> Y(y.v.data(), cout_, hw);
    if (k_ == 1) {
      Y.noalias() = Wm * CMatMap<T>(x.v.data(), cin_, hw);
      if (cache) cache->input = x;
    } else {
      std::vector<T> col(K * hw);
      im2col(x, col.data());
      Y.noalias() = Wm * CMatMap<T>(col.data(), K, hw);
      if (cache) cache->col = std::move(col);
    }
    for (std::size_t c = 0; c < cout_; ++c) {
      T* row = y.channel(c);
      const T b = bias_.value[c];
      for (std::size_t i = 0; i < hw; ++i) row[i] += b;
    }
    return y;
  }

  // Accumulates parameter gradients; returns dL/dx.
  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache, std::size_t H, std::size_t W, bool need_dx = true) {
    const std::size_t hw = H * W;
    const std::size_t K = cin_ * k_ * k_;
    CMatMap<T> dY(dy.v.data(), cout_, hw);
    MatMap<T> dW(weight_.grad.data(), cout_, K);
    const T* colp = k_ == 1 ? cache.input.v.data() : cache.col.data();
    CMatMap<T> col(colp, K, hw);
    dW.noalias() += dY * col.transpose();
    for (std::size_t c = 0; c < cout_; ++c) {
      const T* row = dy.channel(c);
      T acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += row[i];
      bias_.grad[c] += acc;
    }
    Tensor<T> dx;
    if (!need_dx) return dx;
    CMatMap<T> Wm(weight_.value.data(), cout_, K);
    if (k_ == 1) {
      dx = Tensor<T>(cin_, H, W);
      MatMap<T>(dx.v.data(), cin_, hw).noalias() = Wm.transpose() * dY;
    } else {
      std::vector<T> dcol(K * hw);
      MatMap<T>(dcol.data(), K, hw).noalias() = Wm.transpose() * dY;
      dx = Tensor<T>(cin_, H, W);
      col2im(dcol.data(), dx);
    }
    return dx;
  }

  std::vector<Param<T>*> params() { return {&weight_, &bias_}; }

 private:
  // Row (c, ky, kx), column (h, w); zero padding of 1.
  void im2col(const Tensor<T>& x, T* col) const {
    const long H = static_cast<long>(x.H), W = static_cast<long>(x.W);
    for (std::size_t c = 0; c < cin_; ++c) {
      const T* src = x.channel(c);
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) {
          T* dst = col + ((c * 3 + static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)) * x.plane();
          for (long h = 0; h < H; ++h) {
            const long sh = h + ky - 1;
            T* drow = dst + h * W;
            if (sh < 0 || sh >= H) {
              std::fill(drow, drow + W, T(0));
              continue;
            }
            const T* srow = src + sh * W;
            for (long w = 0; w < W; ++w) {
              const long sw = w + kx - 1;
              drow[w] = (sw < 0 || sw >= W) ? T(0) : srow[sw];
            }
          }
        }
    }
  }

  void col2im(const T* col, Tensor<T>& dx) const {
    const long H = static_cast<long>(dx.H), W = static_cast<long>(dx.W);
    for (std::size_t c = 0; c < cin_; ++c) {
      T* dst = dx.channel(c);
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) {
          const T* src = col + ((c * 3 + static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)) * dx.plane();
          for (long h = 0; h < H; ++h) {
            const long sh = h + ky - 1;
            if (sh < 0 || sh >= H) continue;
            const T* srow = src + h * W;
            T* drow = dst + sh * W;
            for (long w = 0; w < W; ++w) {
              const long sw = w + kx - 1;
              if (sw >= 0 && sw < W) drow[sw] += srow[w];
            }
          }
        }
    }
  }

  std::size_t cin_ = 0, cout_ = 0, k_ = 3;
  Param<T> weight_, bias_;
};

// ---------------------------------------------------------------------------

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out)
      : in_(in), out_(out), weight_(name + ".weight", out * in), bias_(name + ".bias", out) {}

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    init_uniform(weight_, bound, rng);
    init_uniform(bias_, bound, rng);
  }

  std::vector<T> forward(std::span<const T> x) const {
    if (x.size() != in_) throw DimensionError("Linear: input size mismatch");
    std::vector<T> y(bias_.value);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> Y(y.data(), out_);
    Y.noalias() += CMatMap<T>(weight_.value.data(), out_, in_) *
                   Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(x.data(), in_);
    return y;
  }

  std::vector<T> backward(std::span<const T> dy, std::span<const T> x) {
    for (std::size_t o = 0; o < out_; ++o) {
      bias_.grad[o] += dy[o];
      T* g = weight_.grad.data() + o * in_;
      for (std::size_t i = 0; i < in_; ++i) g[i] += dy[o] * x[i];
    }
    std::vector<T> dx(in_, T(0));
    for (std::size_t o = 0; o < out_; ++o) {
      const T* w = weight_.value.data() + o * in_;
      for (std::size_t i = 0; i < in_; ++i) dx[i] += w[i] * dy[o];
    }
    return dx;
  }

  std::vector<Param<T>*> params() { return {&weight_, &bias_}; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Param<T> weight_, bias_;
};

// ---------------------------------------------------------------------------

template <class T>
class GroupNorm {
 public:
  struct Cache {
    std::vector<T> xhat;
    std::vector<T> inv_std;  // per group
  };

  GroupNorm() = default;
  GroupNorm(std::string name, std::size_t channels, std::size_t groups, double eps = 1e-5)
      : C_(channels), G_(groups), eps_(eps), gamma_(name + ".gamma", channels), beta_(name + ".beta", channels) {
    if (groups == 0 || channels % groups != 0) throw ParameterError("GroupNorm: channels must divide into groups");
    std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    const std::size_t cpg = C_ / G_, hw = x.plane(), n = cpg * hw;
    Tensor<T> y(x.C, x.H, x.W);
    std::vector<T> xhat(x.v.size()), inv(G_);
    for (std::size_t g = 0; g < G_; ++g) {
      const T* xs = x.v.data() + g * n;
      T mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += xs[i];
      mean /= static_cast<T>(n);
      T var = 0;
      for (std::size_t i = 0; i < n; ++i) var += (xs[i] - mean) * (xs[i] - mean);
      var /= static_cast<T>(n);
      const T is = T(1) / std::sqrt(var + static_cast<T>(eps_));
      inv[g] = is;
      for (std::size_t i = 0; i < n; ++i) xhat[g * n + i] = (xs[i] - mean) * is;
    }
    for (std::size_t c = 0; c < C_; ++c) {
      const T ga = gamma_.value[c], be = beta_.value[c];
      const T* xh = xhat.data() + c * hw;
      T* yo = y.channel(c);
      for (std::size_t i = 0; i < hw; ++i) yo[i] = ga * xh[i] + be;
    }
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    const std::size_t hw = dy.plane(), cpg = C_ / G_, n = cpg * hw;
    Tensor<T> dx(dy.C, dy.H, dy.W);
    std::vector<T> dxhat(dy.v.size());
    for (std::size_t c = 0; c < C_; ++c) {
      const T* d = dy.channel(c);
      const T* xh = cache.xhat.data() + c * hw;
      T gsum = 0, bsum = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        gsum += d[i] * xh[i];
        bsum += d[i];
        dxhat[c * hw + i] = d[i] * gamma_.value[c];
      }
      gamma_.grad[c] += gsum;
      beta_.grad[c] += bsum;
    }
    for (std::size_t g = 0; g < G_; ++g) {
      const T* dh = dxhat.data() + g * n;
      const T* xh = cache.xhat.data() + g * n;
      T s1 = 0, s2 = 0;
      for (std::size_t i = 0; i < n; ++i) {
        s1 += dh[i];
        s2 += dh[i] * xh[i];
      }
      const T k = cache.inv_std[g] / static_cast<T>(n);
      T* o = dx.v.data() + g * n;
      for (std::size_t i = 0; i < n; ++i) o[i] = k * (static_cast<T>(n) * dh[i] - s1 - xh[i] * s2);
    }
    return dx;
  }

  std::vector<Param<T>*> params() { return {&gamma_, &beta_}; }

 private:
  std::size_t C_ = 0, G_ = 1;
  double eps_ = 1e-5;
  Param<T> gamma_, beta_;
};

// ---------------------------------------------------------------------------
// Parameter-free ops

template <class T>
inline std::vector<T> silu(std::span<const T> x) {
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <class T>
inline std::vector<T> silu_backward(std::span<const T> dy, std::span<const T> x) {
  std::vector<T> dx(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = sigmoid(x[i]);
    dx[i] = dy[i] * s * (T(1) + x[i] * (T(1) - s));
  }
  return dx;
}

template <class T>
inline Tensor<T> avg_pool2(const Tensor<T>& x) {
  if (x.H % 2 || x.W % 2) throw DimensionError("avg_pool2: spatial size must be even");
  Tensor<T> y(x.C, x.H / 2, x.W / 2);
  for (std::size_t c = 0; c < x.C; ++c) {
    const T* s = x.channel(c);
    T* d = y.channel(c);
    for (std::size_t h = 0; h < y.H; ++h)
      for (std::size_t w = 0; w < y.W; ++w)
        d[h * y.W + w] = T(0.25) * (s[(2 * h) * x.W + 2 * w] + s[(2 * h) * x.W + 2 * w + 1] +
                                    s[(2 * h + 1) * x.W + 2 * w] + s[(2 * h + 1) * x.W + 2 * w + 1]);
  }
  return y;
}

template <class T>
inline Tensor<T> avg_pool2_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.C, dy.H * 2, dy.W * 2);
  for (std::size_t c = 0; c < dy.C; ++c) {
    const T* s = dy.channel(c);
    T* d = dx.channel(c);
    for (std::size_t h = 0; h < dx.H; ++h)
      for (std::size_t w = 0; w < dx.W; ++w) d[h * dx.W + w] = T(0.25) * s[(h / 2) * dy.W + w / 2];
  }
  return dx;
}

template <class T>
inline Tensor<T> upsample2(const Tensor<T>& x) {
  Tensor<T> y(x.C, x.H * 2, x.W * 2);
  for (std::size_t c = 0; c < x.C; ++c) {
    const T* s = x.channel(c);
    T* d = y.channel(c);
    for (std::size_t h = 0; h < y.H; ++h)
      for (std::size_t w = 0; w < y.W; ++w) d[h * y.W + w] = s[(h / 2) * x.W + w / 2];
  }
  return y;
}

template <class T>
inline Tensor<T> upsample2_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.C, dy.H / 2, dy.W / 2);
  for (std::size_t c = 0; c < dy.C; ++c) {
    const T* s = dy.channel(c);
    T* d = dx.channel(c);
    for (std::size_t h = 0; h < dy.H; ++h)
      for (std::size_t w = 0; w < dy.W; ++w) d[(h / 2) * dx.W + w / 2] += s[h * dy.W + w];
  }
  return dx;
}

template <class T>
inline Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.H != b.H || a.W != b.W) throw DimensionError("concat: spatial mismatch");
  Tensor<T> y(a.C + b.C, a.H, a.W);
  std::copy(a.v.begin(), a.v.end(), y.v.begin());
  std::copy(b.v.begin(), b.v.end(), y.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
  return y;
}

template <class T>
inline std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& y, std::size_t ca) {
  Tensor<T> a(ca, y.H, y.W), b(y.C - ca, y.H, y.W);
  std::copy(y.v.begin(), y.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()), a.v.begin());
  std::copy(y.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()), y.v.end(), b.v.begin());
  return {std::move(a), std::move(b)};
}

/// Sinusoidal embedding: [sin(t f_j) | cos(t f_j)], f_j = 10000^(-j / (dim/2)).
template <class T>
inline std::vector<T> timestep_embedding(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> e(dim, T(0));
  for (std::size_t j = 0; j < half; ++j) {
    const double f = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
    e[j] = static_cast<T>(std::sin(t * f));
    e[half + j] = static_cast<T>(std::cos(t * f));
  }
  return e;
}

// ---------------------------------------------------------------------------

/// Adam with bias correction, no weight decay.
template <class T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(const std::vector<Param<T>*>& params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        m[i] = b1_ * m[i] + (1 - b1_) * g;
        v[i] = b2_ * v[i] + (1 - b2_) * g * g;
        const double mh = m[i] / c1, vh = v[i] / c2;
        p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace bbvol::nn
