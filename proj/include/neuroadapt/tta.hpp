#pragma once

// Stage 2: label-free adaptation of a fine-tuned checkpoint on the target
// stream. Online methods (Tent, T3A) consume batches in stream order and carry
// state forward; SHOT is offline and needs the whole target set up front.
//
// Everything here takes UnlabeledBatch or FeatureBatch, neither of which can
// carry labels.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "neuroadapt/batch.hpp"
#include "neuroadapt/kernels.hpp"
#include "neuroadapt/model.hpp"
#include "neuroadapt/optim.hpp"

namespace neuroadapt {

enum class Method { no_tta, tent, shot, t3a };

const char* to_string(Method m);
Method method_from_string(const std::string& s);
bool is_online(Method m);

struct TentConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t steps = 1;
};

struct ShotConfig {
  double lr = 1e-4;
  double momentum = 0.0;
  double weight_decay = 1e-4;
  std::size_t steps = 1;
  double ent_weight = 1.0;
  double mi_weight = 1.0;  // scales the diversity term
  double pl_weight = 1.0;  // beta
};

struct T3AConfig {
  std::size_t filter_k = 20;
};

struct AdapterConfig {
  Method method = Method::no_tta;
  TentConfig tent;
  ShotConfig shot;
  T3AConfig t3a;
  bool episodic = false;

  void validate() const;
};

nlohmann::json adapter_to_json(const AdapterConfig& c);

// ------------------------------------------------------------------ states

struct NoTtaState {
  HeadParams head;
};

struct TentState {
  HeadParams head;  // only ln_gamma / ln_beta ever change
  OptimizerState opt;
  TentConfig config;
  std::uint64_t batches_seen = 0;
};

struct SupportEntry {
  std::vector<float> z;
  float entropy = 0;
  bool anchor = false;
  std::uint64_t seq = 0;
};

struct T3AState {
  HeadParams head;  // never modified
  std::vector<std::vector<SupportEntry>> supports;  // one set per class
  Matrix prototypes;                                // K x hidden, row k = mean of supports[k]
  std::size_t filter_k = 20;
  std::uint64_t next_seq = 0;
};

struct ShotState {
  HeadParams head;  // W2/b2 stay identical to the checkpoint
  ShotConfig config;
  std::vector<int> pseudo_labels;
  Matrix centroids;  // final-round centroids, K x hidden; rows of skipped classes are zero
  OptimizerState opt;
  std::uint64_t classifier_hash = 0;
  bool adapted = false;
};

using AdapterState = std::variant<NoTtaState, TentState, ShotState, T3AState>;

// Throws ContractError when the checkpoint was trained on another encoder.
AdapterState adapter_init(const AdapterConfig& config, const Checkpoint& checkpoint, const Encoder& encoder);

Method method_of(const AdapterState& state);
const HeadParams& adapted_head(const AdapterState& state);

// ------------------------------------------------------------------- Tent

template <typename T>
struct TentObjective {
  T loss;
  HeadGrads<T> grads;  // nonzero only for ln_gamma / ln_beta
};

// Mean prediction entropy over the batch and its gradient with respect to
// the normalization affine parameters.
template <typename T>
TentObjective<T> tent_objective(const BasicHeadParams<T>& head, const BasicMatrix<T>& z) {
  auto fwd = head_forward(head, z, HeadMode::eval());
  auto [loss, dlogits] = mean_entropy_with_grad(fwd.logits);
  return {loss, head_backward(head, fwd.cache, dlogits, ParamSubset::norm_affine_only)};
}

struct TentStepInfo {
  double loss = 0;  // mean entropy before the last update
};

// Applies `steps` SGD-momentum updates, then predicts with the new parameters.
Matrix tent_step(TentState& state, const FeatureBatch& batch, std::size_t batch_index = 0,
                 TentStepInfo* info = nullptr);

// -------------------------------------------------------------------- T3A

// Inserts each sample's trunk feature into the support set of its predicted
// class (prediction and entropy from the source classifier), keeps the
// filter_k lowest-entropy entries per class (anchors always kept, ties by
// insertion order), recomputes prototypes, and returns softmax(h . c_k).
Matrix t3a_update_and_predict(T3AState& state, const FeatureBatch& batch);

// softmax(h . c_k) with the current prototypes, no update.
Matrix t3a_predict(const T3AState& state, const Matrix& trunk_features);

// ------------------------------------------------------------------- SHOT

// Two rounds of nearest-centroid assignment under cosine distance: soft
// centroids weighted by `probs`, then hard centroids from round-1 labels.
// Distance ties go to the heavier centroid, then the lower class index.
std::vector<int> shot_pseudo_labels(const Matrix& features, const Matrix& probs,
                                    Matrix* centroids_out = nullptr);

template <typename T>
struct ShotLoss {
  T total = 0;
  T ent = 0;
  T div = 0;
  T pl = 0;
  BasicMatrix<T> dlogits;
};

// total = ent_weight * L_ent + mi_weight * L_div + pl_weight * L_PL with
//   L_ent = mean_i H(p_i),  L_div = sum_k pbar_k log pbar_k,
//   L_PL  = mean cross-entropy against `pseudo`.
template <typename T>
ShotLoss<T> shot_loss(const BasicMatrix<T>& logits, std::span<const int> pseudo, const ShotConfig& w) {
  const std::size_t B = logits.rows(), K = logits.cols();
  if (pseudo.size() != B) throw ShapeError("shot_loss: pseudo-label count != batch size");
  ShotLoss<T> out;
  auto [ent, d_ent] = mean_entropy_with_grad(logits);
  out.ent = ent;
  const BasicMatrix<T> p = softmax(logits);
  std::vector<T> pbar(K, T{0});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < K; ++k) pbar[k] += p(i, k);
  for (auto& v : pbar) v /= static_cast<T>(B);
  std::vector<T> logbar(K);
  for (std::size_t k = 0; k < K; ++k) {
    logbar[k] = pbar[k] > T{0} ? std::log(pbar[k]) : T{0};
    out.div += pbar[k] * logbar[k];
  }
  auto ce = cross_entropy<T>(logits, pseudo);
  out.pl = ce.loss;
  out.total = static_cast<T>(w.ent_weight) * out.ent + static_cast<T>(w.mi_weight) * out.div +
              static_cast<T>(w.pl_weight) * out.pl;

  // d L_div / d l_ij = p_ij (log pbar_j - sum_k p_ik log pbar_k) / B
  out.dlogits = BasicMatrix<T>(B, K);
  const T inv_b = T{1} / static_cast<T>(B);
  for (std::size_t i = 0; i < B; ++i) {
    T mix = 0;
    for (std::size_t k = 0; k < K; ++k) mix += p(i, k) * logbar[k];
    for (std::size_t k = 0; k < K; ++k) {
      const T d_div = p(i, k) * (logbar[k] - mix) * inv_b;
      out.dlogits(i, k) = static_cast<T>(w.ent_weight) * d_ent(i, k) + static_cast<T>(w.mi_weight) * d_div +
                          static_cast<T>(w.pl_weight) * ce.dlogits(i, k);
    }
  }
  return out;
}

struct ShotBatchInfo {
  double total = 0, ent = 0, div = 0, pl = 0;
};

// Full pass for pseudo-labels, then one pass of per-batch SGD steps on the
// adapter-only parameters. `batches` are the target set in stream order.
void shot_offline_adapt(ShotState& state, std::span<const FeatureBatch> batches,
                        std::vector<ShotBatchInfo>* info = nullptr);
// Same, partitioning `features` sequentially into batches of `batch_size`.
void shot_offline_adapt(ShotState& state, const Matrix& features, std::size_t batch_size);

// ------------------------------------------------------------------ driver

struct BatchTrace {
  std::size_t batch = 0;
  std::size_t size = 0;
  double mean_entropy = 0;            // of the emitted predictions
  std::vector<double> pred_marginal;  // share of argmax predictions per class
  std::optional<double> loss;
  std::optional<double> loss_ent, loss_div, loss_pl;
  std::vector<std::size_t> support_sizes;
};

nlohmann::json trace_to_json(const BatchTrace& t);

struct AdaptationResult {
  Matrix probs;  // one row per target record, stream order
  std::vector<std::string> record_ids;
  std::vector<BatchTrace> trace;
};

// Continues from `state`; online methods may be fed a stream in pieces.
AdaptationResult run_adaptation(AdapterState& state, const Encoder& encoder,
                                std::span<const UnlabeledBatch> stream);

AdaptationResult run_adaptation(const AdapterConfig& config, const Checkpoint& checkpoint,
                                const Encoder& encoder, std::span<const UnlabeledBatch> stream);

}  // namespace neuroadapt
