#pragma once

// f(x) = h(g(x)): a frozen feature extractor g followed by the shared head
//   LayerNorm -> Linear(hidden) -> GELU -> Dropout -> Linear(K).
// The head is templated on the scalar type so gradient checks can run the
// exact production code path in double precision.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "neuroadapt/batch.hpp"
#include "neuroadapt/errors.hpp"
#include "neuroadapt/kernels.hpp"
#include "neuroadapt/matrix.hpp"
#include "neuroadapt/rng.hpp"

namespace neuroadapt {

inline constexpr std::size_t kDefaultHidden = 128;
inline constexpr double kDefaultDropout = 0.1;

// ----------------------------------------------------------------- encoder

enum class EncoderKind { identity, random_projection, two_layer };

const char* to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(const std::string& s);

struct EncoderSpec {
  std::string name = "identity";
  EncoderKind kind = EncoderKind::identity;
  std::size_t channels = 1;
  std::size_t samples = 1;
  std::size_t out_dim = 0;  // ignored by identity
  std::size_t hidden = 0;   // two_layer only
  std::size_t patch = 0;    // two_layer token length in samples; 0 = whole window
  std::uint64_t seed = 0;

  std::size_t input_size() const { return channels * samples; }
  std::size_t feature_dim() const;
  void validate() const;
};

// Parameters are drawn once from `spec.seed` and never change afterwards.
class Encoder {
 public:
  explicit Encoder(EncoderSpec spec);

  const EncoderSpec& spec() const { return spec_; }
  std::size_t feature_dim() const { return spec_.feature_dim(); }

  // Rows of the result follow the batch order.
  FeatureBatch encode(const WindowBatch& batch) const;
  FeatureBatch encode(const UnlabeledBatch& batch) const;
  Matrix encode_windows(std::span<const float> windows, std::size_t count) const;

  // Fingerprint of spec and all parameter values.
  std::uint64_t hash() const;

 private:
  void encode_one(std::span<const float> window, std::span<float> out) const;

  EncoderSpec spec_;
  Matrix proj_;                // random_projection: (C*T) x out_dim
  Matrix w1_;                  // two_layer: (C*patch) x hidden
  std::vector<float> b1_;
  Matrix w2_;                  // two_layer: hidden x out_dim
  std::vector<float> b2_;
};

// Arithmetic mean of a nonempty sequence of equal-length vectors.
std::vector<float> mean_pool(std::span<const std::vector<float>> seq);

// -------------------------------------------------------------------- head

template <typename T>
struct BasicHeadParams {
  std::vector<T> ln_gamma;
  std::vector<T> ln_beta;
  BasicMatrix<T> w1;  // D x hidden
  std::vector<T> b1;
  BasicMatrix<T> w2;  // hidden x K; column k is the class weight vector
  std::vector<T> b2;
  double dropout_rate = kDefaultDropout;

  std::size_t input_dim() const { return ln_gamma.size(); }
  std::size_t hidden_dim() const { return w1.cols(); }
  std::size_t num_classes() const { return b2.size(); }

  std::vector<T> class_weight(std::size_t k) const {
    std::vector<T> w(w2.rows());
    for (std::size_t h = 0; h < w2.rows(); ++h) w[h] = w2(h, k);
    return w;
  }

  void validate() const {
    const std::size_t D = ln_gamma.size();
    if (D == 0 || ln_beta.size() != D || w1.rows() != D || b1.size() != w1.cols() ||
        w2.rows() != w1.cols() || b2.size() != w2.cols() || b2.size() < 2) {
      throw ShapeError("head parameters have inconsistent shapes (D=" + std::to_string(D) +
                       ", W1 " + shape_str(w1) + ", W2 " + shape_str(w2) + ")");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("head dropout must be in [0,1)");
  }

  template <typename U>
  BasicHeadParams<U> cast() const {
    return {{ln_gamma.begin(), ln_gamma.end()}, {ln_beta.begin(), ln_beta.end()}, w1.template cast<U>(),
            {b1.begin(), b1.end()}, w2.template cast<U>(), {b2.begin(), b2.end()}, dropout_rate};
  }

  bool operator==(const BasicHeadParams&) const = default;
};

using HeadParams = BasicHeadParams<float>;
using HeadParamsD = BasicHeadParams<double>;

// Same layout, used for gradients.
template <typename T>
using HeadGrads = BasicHeadParams<T>;

template <typename T>
HeadGrads<T> zero_like(const BasicHeadParams<T>& p) {
  return {std::vector<T>(p.ln_gamma.size(), T{0}), std::vector<T>(p.ln_beta.size(), T{0}),
          BasicMatrix<T>(p.w1.rows(), p.w1.cols()), std::vector<T>(p.b1.size(), T{0}),
          BasicMatrix<T>(p.w2.rows(), p.w2.cols()), std::vector<T>(p.b2.size(), T{0}),
          p.dropout_rate};
}

// PyTorch-style init: gamma = 1, beta = 0, linear weights and biases
// uniform in +-1/sqrt(fan_in).
HeadParams init_head(std::size_t input_dim, std::size_t num_classes, Rng& rng,
                     std::size_t hidden = kDefaultHidden, double dropout = kDefaultDropout);

enum class ParamSubset { all_head, norm_affine_only, adapter_only, none };

const char* to_string(ParamSubset s);

// Parameter blocks in declaration order, filtered by subset.
std::vector<std::span<float>> param_blocks(HeadParams& p, ParamSubset subset);
std::vector<std::span<const float>> param_blocks(const HeadParams& p, ParamSubset subset);

// Fingerprints of parameter groups, for frozen-parameter contracts.
std::uint64_t hash_head(const HeadParams& p);
std::uint64_t hash_classifier(const HeadParams& p);    // W2, b2
std::uint64_t hash_non_norm(const HeadParams& p);      // W1, b1, W2, b2

class HeadMode {
 public:
  static HeadMode eval() { return HeadMode(nullptr); }
  static HeadMode train(Rng& rng) { return HeadMode(&rng); }
  bool training() const { return rng_ != nullptr; }
  Rng* rng() const { return rng_; }

 private:
  explicit HeadMode(Rng* rng) : rng_(rng) {}
  Rng* rng_;
};

template <typename T>
struct HeadCache {
  LayerNormCache<T> ln;
  LinearCache<T> fc1;
  GeluCache<T> act;
  BasicMatrix<T> hidden;        // GELU output before dropout
  BasicMatrix<T> dropout_mask;  // empty in eval mode
  LinearCache<T> fc2;
};

template <typename T>
struct HeadOutput {
  BasicMatrix<T> logits;
  HeadCache<T> cache;
};

template <typename T>
HeadOutput<T> head_forward(const BasicHeadParams<T>& p, const BasicMatrix<T>& z, HeadMode mode) {
  if (z.cols() != p.input_dim()) {
    throw ShapeError("head: features have dim " + std::to_string(z.cols()) + ", head expects " +
                     std::to_string(p.input_dim()));
  }
  HeadCache<T> cache;
  auto [ln_out, ln_cache] = layernorm_forward<T>(z, p.ln_gamma, p.ln_beta);
  auto [pre, fc1_cache] = linear_forward<T>(ln_out, p.w1, p.b1);
  auto [act, act_cache] = gelu_forward<T>(pre);
  cache.ln = std::move(ln_cache);
  cache.fc1 = std::move(fc1_cache);
  cache.act = std::move(act_cache);
  cache.hidden = act;
  if (mode.training() && p.dropout_rate > 0.0) {
    cache.dropout_mask = dropout_mask<T>(*mode.rng(), act.rows(), act.cols(), p.dropout_rate);
    auto a = act.data();
    auto m = cache.dropout_mask.data();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] *= m[i];
  }
  auto [logits, fc2_cache] = linear_forward<T>(act, p.w2, p.b2);
  cache.fc2 = std::move(fc2_cache);
  return {std::move(logits), std::move(cache)};
}

// Output of LayerNorm -> Linear -> GELU in eval mode: the representation the
// final linear layer (and prototype classifiers) see.
template <typename T>
BasicMatrix<T> head_trunk(const BasicHeadParams<T>& p, const BasicMatrix<T>& z) {
  return head_forward(p, z, HeadMode::eval()).cache.hidden;
}

// Gradients for the selected parameters; unselected blocks are exactly zero.
template <typename T>
HeadGrads<T> head_backward(const BasicHeadParams<T>& p, const HeadCache<T>& cache,
                           const BasicMatrix<T>& dlogits, ParamSubset subset) {
  HeadGrads<T> g = zero_like(p);
  if (subset == ParamSubset::none) return g;

  auto fc2 = linear_backward(cache.fc2, dlogits);
  BasicMatrix<T> dact = std::move(fc2.dx);
  if (!cache.dropout_mask.empty()) {
    auto d = dact.data();
    auto m = cache.dropout_mask.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= m[i];
  }
  auto dpre = gelu_backward(cache.act, dact);
  auto fc1 = linear_backward(cache.fc1, dpre);
  auto ln = layernorm_backward(cache.ln, fc1.dx);

  g.ln_gamma = std::move(ln.dgamma);
  g.ln_beta = std::move(ln.dbeta);
  if (subset == ParamSubset::all_head || subset == ParamSubset::adapter_only) {
    g.w1 = std::move(fc1.dw);
    g.b1 = std::move(fc1.db);
  }
  if (subset == ParamSubset::all_head) {
    g.w2 = std::move(fc2.dw);
    g.b2 = std::move(fc2.db);
  }
  return g;
}

Matrix predict_proba(const HeadParams& head, const Encoder& encoder, const WindowBatch& batch);
Matrix predict_proba(const HeadParams& head, const Matrix& features);

// ------------------------------------------------------------- checkpoint

// Binary layout, all little-endian:
//   "NACK" | u32 version | u32 D | u32 K | u32 hidden | f32 dropout |
//   u64 encoder hash | f32 blocks: ln_gamma, ln_beta, W1, b1, W2, b2
struct Checkpoint {
  HeadParams head;
  std::uint64_t encoder_hash = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
std::uint64_t checkpoint_hash(const Checkpoint& ckpt);

}  // namespace neuroadapt
