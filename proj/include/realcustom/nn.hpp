#pragma once

// Layer primitives shared by the toy encoders, the denoiser and the projector,
// each with the backward pass the training loop needs. Weight matrices are
// stored input-major ([in x out]) so a layer is `x · W`.

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "realcustom/rng.hpp"
#include "realcustom/tensor.hpp"

namespace realcustom::nn {

inline constexpr double kLayerNormEps = 1e-5;

/// Parameter-free layer norm over the last axis of a matrix.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x) {
  require_rank2(x, "layer_norm");
  BasicTensor<T> y(x.shape());
  const std::size_t n = x.dim(1);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    const auto r = x.row(i);
    double mean = 0.0;
    for (auto v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (auto v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    auto out = y.row(i);
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<T>((r[j] - mean) * inv);
  }
  return y;
}

/// dx for y = layer_norm(x); needs the forward input.
template <typename T>
BasicTensor<T> layer_norm_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(x.shape());
  const std::size_t n = x.dim(1);
  std::vector<double> yhat(n);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    const auto r = x.row(i);
    const auto g = dy.row(i);
    double mean = 0.0;
    for (auto v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (auto v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    double mean_g = 0.0, mean_gy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yhat[j] = (r[j] - mean) * inv;
      mean_g += g[j];
      mean_gy += g[j] * yhat[j];
    }
    mean_g /= static_cast<double>(n);
    mean_gy /= static_cast<double>(n);
    auto out = dx.row(i);
    for (std::size_t j = 0; j < n; ++j)
      out[j] = static_cast<T>(inv * (g[j] - mean_g - yhat[j] * mean_gy));
  }
  return dx;
}

// tanh approximation of GELU
inline double gelu_scalar(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad_scalar(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (auto& v : y.data()) v = static_cast<T>(gelu_scalar(v));
  return y;
}

template <typename T>
BasicTensor<T> gelu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    dx[i] = static_cast<T>(dy[i] * gelu_grad_scalar(x[i]));
  return dx;
}

/// Adds a rank-1 bias to every row.
template <typename T>
BasicTensor<T> add_bias(BasicTensor<T> x, const BasicTensor<T>& bias) {
  if (bias.size() != x.dim(1)) {
    throw ShapeError("bias " + shape_string(bias.shape()) + " does not fit " +
                     shape_string(x.shape()));
  }
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return x;
}

template <typename T>
BasicTensor<T> column_sums(const BasicTensor<T>& x) {
  std::vector<double> acc(x.dim(1), 0.0);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    const auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) acc[j] += r[j];
  }
  BasicTensor<T> out({x.dim(1)});
  for (std::size_t j = 0; j < acc.size(); ++j) out[j] = static_cast<T>(acc[j]);
  return out;
}

/// Scaled-normal initialisation, std = 1/sqrt(fan_in).
template <typename T>
BasicTensor<T> init_weight(Rng& rng, std::size_t in, std::size_t out, double gain = 1.0) {
  return rng.normal_tensor<T>({in, out}, gain / std::sqrt(static_cast<double>(in)));
}

// ---------------------------------------------------------------------------
// Two-layer perceptron: y = gelu(x W1 + b1) W2 + b2

template <typename T>
struct Mlp {
  BasicTensor<T> w1, b1, w2, b2;

  static Mlp init(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out) {
    Mlp m;
    m.w1 = init_weight<T>(rng, in, hidden);
    m.b1 = BasicTensor<T>({hidden});
    m.w2 = init_weight<T>(rng, hidden, out);
    m.b2 = BasicTensor<T>({out});
    return m;
  }

  static Mlp zeros_like(const Mlp& o) {
    return {BasicTensor<T>(o.w1.shape()), BasicTensor<T>(o.b1.shape()),
            BasicTensor<T>(o.w2.shape()), BasicTensor<T>(o.b2.shape())};
  }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }

  template <typename U>
  Mlp<U> cast() const {
    return {w1.template cast<U>(), b1.template cast<U>(), w2.template cast<U>(),
            b2.template cast<U>()};
  }

  struct Cache {
    BasicTensor<T> input, pre;
  };

  BasicTensor<T> forward(const BasicTensor<T>& x, Cache* cache = nullptr) const {
    BasicTensor<T> pre = add_bias(matmul(x, w1), b1);
    BasicTensor<T> y = add_bias(matmul(gelu(pre), w2), b2);
    if (cache) *cache = {x, std::move(pre)};
    return y;
  }

  /// Returns dx; accumulates parameter gradients into `grad` when given.
  BasicTensor<T> backward(const Cache& cache, const BasicTensor<T>& dy,
                          Mlp* grad = nullptr) const {
    if (grad) {
      add_inplace(grad->w2, matmul_tn(gelu(cache.pre), dy));
      add_inplace(grad->b2, column_sums(dy));
    }
    const BasicTensor<T> dpre = gelu_backward(cache.pre, matmul_nt(dy, w2));
    if (grad) {
      add_inplace(grad->w1, matmul_tn(cache.input, dpre));
      add_inplace(grad->b1, column_sums(dpre));
    }
    return matmul_nt(dpre, w1);
  }
};

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention on pre-projected Q, K, V.
// Head h owns columns [h*dh, (h+1)*dh); logits are scaled by 1/sqrt(dh).

template <typename T>
struct AttentionGrads {
  BasicTensor<T> dq, dk, dv;
};

template <typename T>
BasicTensor<T> multihead_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                   const BasicTensor<T>& v, std::size_t heads,
                                   std::vector<BasicTensor<T>>* probs_out = nullptr) {
  require_rank2(q, "attention");
  if (k.dim(1) != q.dim(1) || v.dim(0) != k.dim(0) || v.dim(1) != q.dim(1) ||
      heads == 0 || q.dim(1) % heads != 0) {
    throw ShapeError("attention: incompatible Q " + shape_string(q.shape()) + ", K " +
                     shape_string(k.shape()) + ", V " + shape_string(v.shape()) +
                     " for " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = q.dim(1) / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  BasicTensor<T> out({q.dim(0), q.dim(1)});
  if (probs_out) probs_out->clear();
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    const auto kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    const auto vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    auto p = softmax_rows(matmul_nt(qh, kh), scale);
    set_cols(out, h * dh, matmul(p, vh));
    if (probs_out) probs_out->push_back(std::move(p));
  }
  return out;
}

template <typename T>
AttentionGrads<T> multihead_attention_backward(const BasicTensor<T>& q,
                                               const BasicTensor<T>& k,
                                               const BasicTensor<T>& v,
                                               const std::vector<BasicTensor<T>>& probs,
                                               const BasicTensor<T>& dout) {
  const std::size_t heads = probs.size();
  const std::size_t dh = q.dim(1) / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionGrads<T> g{BasicTensor<T>(q.shape()), BasicTensor<T>(k.shape()),
                      BasicTensor<T>(v.shape())};
  for (std::size_t h = 0; h < heads; ++h) {
    const auto& p = probs[h];
    const auto qh = slice_cols(q, h * dh, dh);
    const auto kh = slice_cols(k, h * dh, dh);
    const auto vh = slice_cols(v, h * dh, dh);
    const auto doh = slice_cols(dout, h * dh, dh);
    set_cols(g.dv, h * dh, matmul_tn(p, doh));
    const auto dp = matmul_nt(doh, vh);
    BasicTensor<T> ds(p.shape());
    for (std::size_t i = 0; i < p.dim(0); ++i) {
      const auto pr = p.row(i);
      const auto dr = dp.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < pr.size(); ++j) dot += static_cast<double>(pr[j]) * dr[j];
      auto sr = ds.row(i);
      for (std::size_t j = 0; j < pr.size(); ++j)
        sr[j] = static_cast<T>(scale * pr[j] * (dr[j] - dot));
    }
    set_cols(g.dq, h * dh, matmul(ds, kh));
    set_cols(g.dk, h * dh, matmul_tn(ds, qh));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Token-grid resampling between UNet resolutions. Tokens are row-major
// positions of an r x r grid, one feature row per position.

template <typename T>
BasicTensor<T> avg_pool_tokens(const BasicTensor<T>& x, std::size_t r, std::size_t factor) {
  const std::size_t ro = r / factor, d = x.dim(1);
  BasicTensor<T> y({ro * ro, d});
  const double w = 1.0 / static_cast<double>(factor * factor);
  std::vector<double> acc(d);
  for (std::size_t i = 0; i < ro; ++i)
    for (std::size_t j = 0; j < ro; ++j) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t a = 0; a < factor; ++a)
        for (std::size_t b = 0; b < factor; ++b) {
          const auto src = x.row((i * factor + a) * r + j * factor + b);
          for (std::size_t c = 0; c < d; ++c) acc[c] += src[c];
        }
      auto dst = y.row(i * ro + j);
      for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<T>(acc[c] * w);
    }
  return y;
}

template <typename T>
BasicTensor<T> avg_pool_tokens_backward(const BasicTensor<T>& dy, std::size_t r,
                                        std::size_t factor) {
  const std::size_t ro = r / factor, d = dy.dim(1);
  BasicTensor<T> dx({r * r, d});
  const double w = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      const auto src = dy.row((i / factor) * ro + j / factor);
      auto dst = dx.row(i * r + j);
      for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<T>(src[c] * w);
    }
  return dx;
}

/// Nearest upsample of an r x r token grid by an integer factor.
template <typename T>
BasicTensor<T> upsample_tokens(const BasicTensor<T>& x, std::size_t r, std::size_t factor) {
  const std::size_t ro = r * factor, d = x.dim(1);
  BasicTensor<T> y({ro * ro, d});
  for (std::size_t i = 0; i < ro; ++i)
    for (std::size_t j = 0; j < ro; ++j) {
      const auto src = x.row((i / factor) * r + j / factor);
      std::copy(src.begin(), src.end(), y.row(i * ro + j).begin());
    }
  return y;
}

template <typename T>
BasicTensor<T> upsample_tokens_backward(const BasicTensor<T>& dy, std::size_t r,
                                        std::size_t factor) {
  const std::size_t ro = r * factor, d = dy.dim(1);
  std::vector<double> acc(r * r * d, 0.0);
  for (std::size_t i = 0; i < ro; ++i)
    for (std::size_t j = 0; j < ro; ++j) {
      const auto src = dy.row(i * ro + j);
      double* dst = acc.data() + ((i / factor) * r + j / factor) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  BasicTensor<T> dx({r * r, d});
  for (std::size_t i = 0; i < acc.size(); ++i) dx[i] = static_cast<T>(acc[i]);
  return dx;
}

}  // namespace realcustom::nn
