#pragma once

// Forward/backward kernels for the layers the classifier head is built from.
// Every backward takes the cache produced by its forward and checks that the
// upstream gradient has the cached shape.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "neuroadapt/errors.hpp"
#include "neuroadapt/matrix.hpp"
#include "neuroadapt/rng.hpp"

namespace neuroadapt {

inline constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------- layernorm

template <typename T>
struct LayerNormCache {
  BasicMatrix<T> x_hat;
  std::vector<T> inv_std;  // one per row
  std::vector<T> gamma;
};

template <typename T>
struct LayerNormGrads {
  BasicMatrix<T> dx;
  std::vector<T> dgamma;
  std::vector<T> dbeta;
};

template <typename T>
std::pair<BasicMatrix<T>, LayerNormCache<T>> layernorm_forward(const BasicMatrix<T>& x,
                                                               std::span<const T> gamma,
                                                               std::span<const T> beta,
                                                               double eps = kLayerNormEps) {
  const std::size_t B = x.rows(), D = x.cols();
  if (D == 0) throw ShapeError("layernorm: feature dimension must be >= 1");
  if (gamma.size() != D || beta.size() != D) {
    throw ShapeError("layernorm: input has " + std::to_string(D) + " features but gamma/beta have " +
                     std::to_string(gamma.size()) + "/" + std::to_string(beta.size()));
  }
  if (!(eps > 0)) throw ContractError("layernorm: eps must be positive");

  LayerNormCache<T> cache{BasicMatrix<T>(B, D), std::vector<T>(B), {gamma.begin(), gamma.end()}};
  BasicMatrix<T> y(B, D);
  for (std::size_t i = 0; i < B; ++i) {
    auto xr = x.row(i);
    T mean = 0;
    for (T v : xr) mean += v;
    mean /= static_cast<T>(D);
    T var = 0;
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<T>(D);
    const T inv_std = T{1} / std::sqrt(var + static_cast<T>(eps));
    cache.inv_std[i] = inv_std;
    auto xh = cache.x_hat.row(i);
    auto yr = y.row(i);
    for (std::size_t j = 0; j < D; ++j) {
      xh[j] = (xr[j] - mean) * inv_std;
      yr[j] = gamma[j] * xh[j] + beta[j];
    }
  }
  return {std::move(y), std::move(cache)};
}

template <typename T>
LayerNormGrads<T> layernorm_backward(const LayerNormCache<T>& cache, const BasicMatrix<T>& dy) {
  const std::size_t B = cache.x_hat.rows(), D = cache.x_hat.cols();
  if (D == 0 || cache.gamma.size() != D || cache.inv_std.size() != B) {
    throw ContractError("layernorm_backward: cache is empty or inconsistent");
  }
  if (dy.rows() != B || dy.cols() != D) {
    throw ContractError("layernorm_backward: dy is " + shape_str(dy) + " but cache is " +
                        shape_str(B, D));
  }
  LayerNormGrads<T> g{BasicMatrix<T>(B, D), std::vector<T>(D, T{0}), std::vector<T>(D, T{0})};
  std::vector<T> dxh(D);
  for (std::size_t i = 0; i < B; ++i) {
    auto xh = cache.x_hat.row(i);
    auto dyr = dy.row(i);
    T sum_dxh = 0, sum_dxh_xh = 0;
    for (std::size_t j = 0; j < D; ++j) {
      g.dgamma[j] += dyr[j] * xh[j];
      g.dbeta[j] += dyr[j];
      dxh[j] = dyr[j] * cache.gamma[j];
      sum_dxh += dxh[j];
      sum_dxh_xh += dxh[j] * xh[j];
    }
    const T scale = cache.inv_std[i] / static_cast<T>(D);
    auto dx = g.dx.row(i);
    for (std::size_t j = 0; j < D; ++j) {
      dx[j] = scale * (static_cast<T>(D) * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
    }
  }
  return g;
}

// ------------------------------------------------------------------- linear

template <typename T>
struct LinearCache {
  BasicMatrix<T> x;
  BasicMatrix<T> w;
};

template <typename T>
struct LinearGrads {
  BasicMatrix<T> dx;
  BasicMatrix<T> dw;
  std::vector<T> db;
};

// y = x W + b, with x: B x D, W: D x H, b: H.
template <typename T>
std::pair<BasicMatrix<T>, LinearCache<T>> linear_forward(const BasicMatrix<T>& x,
                                                         const BasicMatrix<T>& w,
                                                         std::span<const T> b) {
  if (x.cols() != w.rows() || b.size() != w.cols()) {
    throw ShapeError("linear: x " + shape_str(x) + ", W " + shape_str(w) + ", b " +
                     std::to_string(b.size()));
  }
  const std::size_t B = x.rows(), D = x.cols(), H = w.cols();
  BasicMatrix<T> y(B, H);
  for (std::size_t i = 0; i < B; ++i) {
    auto yr = y.row(i);
    std::copy(b.begin(), b.end(), yr.begin());
    auto xr = x.row(i);
    for (std::size_t d = 0; d < D; ++d) {
      const T xv = xr[d];
      if (xv == T{0}) continue;
      auto wr = w.row(d);
      for (std::size_t h = 0; h < H; ++h) yr[h] += xv * wr[h];
    }
  }
  return {std::move(y), LinearCache<T>{x, w}};
}

template <typename T>
LinearGrads<T> linear_backward(const LinearCache<T>& cache, const BasicMatrix<T>& dy) {
  const std::size_t B = cache.x.rows(), D = cache.x.cols(), H = cache.w.cols();
  if (cache.w.rows() != D) throw ContractError("linear_backward: cache is inconsistent");
  if (dy.rows() != B || dy.cols() != H) {
    throw ContractError("linear_backward: dy is " + shape_str(dy) + " but forward output was " +
                        shape_str(B, H));
  }
  LinearGrads<T> g{BasicMatrix<T>(B, D), BasicMatrix<T>(D, H), std::vector<T>(H, T{0})};
  for (std::size_t i = 0; i < B; ++i) {
    auto dyr = dy.row(i);
    auto xr = cache.x.row(i);
    auto dxr = g.dx.row(i);
    for (std::size_t h = 0; h < H; ++h) g.db[h] += dyr[h];
    for (std::size_t d = 0; d < D; ++d) {
      auto wr = cache.w.row(d);
      auto dwr = g.dw.row(d);
      T acc = 0;
      const T xv = xr[d];
      for (std::size_t h = 0; h < H; ++h) {
        acc += dyr[h] * wr[h];
        dwr[h] += xv * dyr[h];
      }
      dxr[d] = acc;
    }
  }
  return g;
}

// --------------------------------------------------------------------- gelu

// Exact form: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) * (std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>);
  return cdf + x * pdf;
}

template <typename T>
struct GeluCache {
  BasicMatrix<T> x;
};

template <typename T>
std::pair<BasicMatrix<T>, GeluCache<T>> gelu_forward(const BasicMatrix<T>& x) {
  BasicMatrix<T> y(x.rows(), x.cols());
  auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = gelu(in[i]);
  return {std::move(y), GeluCache<T>{x}};
}

template <typename T>
BasicMatrix<T> gelu_backward(const GeluCache<T>& cache, const BasicMatrix<T>& dy) {
  if (dy.rows() != cache.x.rows() || dy.cols() != cache.x.cols()) {
    throw ContractError("gelu_backward: dy is " + shape_str(dy) + " but cache is " +
                        shape_str(cache.x));
  }
  BasicMatrix<T> dx(dy.rows(), dy.cols());
  auto x = cache.x.data();
  auto g = dy.data();
  auto out = dx.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = g[i] * gelu_grad(x[i]);
  return dx;
}

// ------------------------------------------------------------------ dropout

// Inverted dropout: kept entries are 1/(1-rate), dropped entries 0. With
// rate == 0 the mask is all ones and no draws are consumed.
template <typename T>
BasicMatrix<T> dropout_mask(Rng& rng, std::size_t rows, std::size_t cols, double rate) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
  BasicMatrix<T> mask(rows, cols, T{1});
  if (rate == 0.0) return mask;
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.data()) m = rng.uniform() < rate ? T{0} : keep;
  return mask;
}

// ------------------------------------------------------- softmax / entropy

template <typename T>
void softmax_inplace(std::span<T> row) {
  const T mx = *std::max_element(row.begin(), row.end());
  T sum = 0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : row) v /= sum;
}

template <typename T>
BasicMatrix<T> softmax(const BasicMatrix<T>& logits) {
  if (logits.cols() < 2) throw ShapeError("softmax: need at least 2 classes");
  BasicMatrix<T> p = logits;
  for (std::size_t i = 0; i < p.rows(); ++i) softmax_inplace(p.row(i));
  return p;
}

// Shannon entropy in nats; 0 log 0 = 0.
template <typename T>
T entropy(std::span<const T> probs) {
  T h = 0;
  for (T p : probs)
    if (p > T{0}) h -= p * std::log(p);
  return h;
}

template <typename T>
std::vector<T> row_entropies(const BasicMatrix<T>& probs) {
  std::vector<T> h(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) h[i] = entropy<T>(probs.row(i));
  return h;
}

// Gradient of mean_i H(softmax(l_i)) with respect to the logits:
// dH_i/dl_ij = -p_ij (log p_ij + H_i), divided by the batch size.
template <typename T>
std::pair<T, BasicMatrix<T>> mean_entropy_with_grad(const BasicMatrix<T>& logits) {
  const BasicMatrix<T> p = softmax(logits);
  const std::size_t B = p.rows(), K = p.cols();
  BasicMatrix<T> d(B, K);
  T total = 0;
  const T inv_b = T{1} / static_cast<T>(B);
  for (std::size_t i = 0; i < B; ++i) {
    auto pr = p.row(i);
    const T h = entropy<T>(pr);
    total += h;
    for (std::size_t k = 0; k < K; ++k) {
      const T logp = pr[k] > T{0} ? std::log(pr[k]) : T{0};
      d(i, k) = -pr[k] * (logp + h) * inv_b;
    }
  }
  return {total * inv_b, std::move(d)};
}

// ------------------------------------------------------------ cross-entropy

template <typename T>
struct LossAndGrad {
  T loss;
  BasicMatrix<T> dlogits;
};

template <typename T>
LossAndGrad<T> cross_entropy(const BasicMatrix<T>& logits, std::span<const int> labels) {
  const std::size_t B = logits.rows(), K = logits.cols();
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: " + std::to_string(B) + " rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  if (B == 0) throw DataError("cross_entropy: empty batch");
  LossAndGrad<T> out{T{0}, BasicMatrix<T>(B, K)};
  const T inv_b = T{1} / static_cast<T>(B);
  for (std::size_t i = 0; i < B; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(K) + ")");
    }
    auto lr = logits.row(i);
    const T mx = *std::max_element(lr.begin(), lr.end());
    T sum = 0;
    for (T v : lr) sum += std::exp(v - mx);
    const T log_z = mx + std::log(sum);
    out.loss += (log_z - lr[static_cast<std::size_t>(y)]) * inv_b;
    auto dr = out.dlogits.row(i);
    for (std::size_t k = 0; k < K; ++k) {
      dr[k] = (std::exp(lr[k] - log_z) - (static_cast<std::size_t>(y) == k ? T{1} : T{0})) * inv_b;
    }
  }
  return out;
}

template <typename T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace neuroadapt
