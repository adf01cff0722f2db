#include "neuroadapt/tta.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <functional>
#include <utility>

#include "neuroadapt/hash.hpp"

namespace neuroadapt {

namespace {
template <class... Fs>
struct overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;
}  // namespace

const char* to_string(Method m) {
  switch (m) {
    case Method::no_tta: return "no_tta";
    case Method::tent: return "tent";
    case Method::shot: return "shot";
    case Method::t3a: return "t3a";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "no_tta") return Method::no_tta;
  if (s == "tent") return Method::tent;
  if (s == "shot") return Method::shot;
  if (s == "t3a") return Method::t3a;
  throw ConfigError("unknown method '" + s + "'");
}

bool is_online(Method m) { return m == Method::tent || m == Method::t3a; }

void AdapterConfig::validate() const {
  if (episodic) throw ConfigError("episodic adaptation is not supported");
  if (!(tent.lr > 0) || !(tent.momentum >= 0) || tent.steps == 0) {
    throw ConfigError("tent: lr > 0, momentum >= 0, steps >= 1 required");
  }
  if (!(shot.lr > 0) || !(shot.momentum >= 0) || !(shot.weight_decay >= 0) || shot.steps == 0) {
    throw ConfigError("shot: lr > 0, momentum >= 0, weight_decay >= 0, steps >= 1 required");
  }
  if (!(shot.pl_weight >= 0) || !(shot.mi_weight >= 0) || !(shot.ent_weight >= 0)) {
    throw ConfigError("shot: loss weights must be >= 0");
  }
  if (t3a.filter_k < 1) throw ConfigError("t3a: filter_k must be >= 1");
}

nlohmann::json adapter_to_json(const AdapterConfig& c) {
  return {{"method", to_string(c.method)},
          {"episodic", c.episodic},
          {"tent", {{"lr", c.tent.lr}, {"momentum", c.tent.momentum}, {"steps", c.tent.steps}}},
          {"shot",
           {{"lr", c.shot.lr},
            {"momentum", c.shot.momentum},
            {"weight_decay", c.shot.weight_decay},
            {"steps", c.shot.steps},
            {"ent_weight", c.shot.ent_weight},
            {"mi_weight", c.shot.mi_weight},
            {"pl_weight", c.shot.pl_weight}}},
          {"t3a", {{"filter_k", c.t3a.filter_k}}}};
}

namespace {

std::vector<std::size_t> block_sizes(const HeadParams& head, ParamSubset subset) {
  std::vector<std::size_t> sizes;
  for (auto b : param_blocks(head, subset)) sizes.push_back(b.size());
  return sizes;
}

void recompute_prototype(T3AState& s, std::size_t k) {
  const auto& set = s.supports[k];
  const std::size_t H = s.prototypes.cols();
  std::vector<double> acc(H, 0.0);
  for (const auto& e : set)
    for (std::size_t h = 0; h < H; ++h) acc[h] += e.z[h];
  auto row = s.prototypes.row(k);
  for (std::size_t h = 0; h < H; ++h) row[h] = static_cast<float>(acc[h] / static_cast<double>(set.size()));
}

}  // namespace

AdapterState adapter_init(const AdapterConfig& config, const Checkpoint& checkpoint, const Encoder& encoder) {
  config.validate();
  checkpoint.head.validate();
  if (checkpoint.encoder_hash != encoder.hash()) {
    throw ContractError("checkpoint was trained on encoder " + hex64(checkpoint.encoder_hash) +
                        ", adapting with " + hex64(encoder.hash()));
  }
  if (checkpoint.head.input_dim() != encoder.feature_dim()) {
    throw ShapeError("checkpoint expects " + std::to_string(checkpoint.head.input_dim()) +
                     " features, encoder produces " + std::to_string(encoder.feature_dim()));
  }
  const HeadParams& head = checkpoint.head;
  switch (config.method) {
    case Method::no_tta:
      return NoTtaState{head};
    case Method::tent:
      return TentState{head, OptimizerState::sgd_momentum(block_sizes(head, ParamSubset::norm_affine_only)),
                       config.tent, 0};
    case Method::shot: {
      ShotState s;
      s.head = head;
      s.config = config.shot;
      s.opt = OptimizerState::sgd_momentum(block_sizes(head, ParamSubset::adapter_only));
      s.classifier_hash = hash_classifier(head);
      return s;
    }
    case Method::t3a: {
      T3AState s;
      s.head = head;
      s.filter_k = config.t3a.filter_k;
      const std::size_t K = head.num_classes();
      s.prototypes = Matrix(K, head.hidden_dim());
      s.supports.resize(K);
      for (std::size_t k = 0; k < K; ++k) {
        s.supports[k].push_back({head.class_weight(k), 0.0f, true, s.next_seq++});
        recompute_prototype(s, k);
      }
      return s;
    }
  }
  throw ConfigError("unknown method");
}

Method method_of(const AdapterState& state) {
  return std::visit(overloaded{[](const NoTtaState&) { return Method::no_tta; },
                               [](const TentState&) { return Method::tent; },
                               [](const ShotState&) { return Method::shot; },
                               [](const T3AState&) { return Method::t3a; }},
                    state);
}

const HeadParams& adapted_head(const AdapterState& state) {
  return std::visit([](const auto& s) -> const HeadParams& { return s.head; }, state);
}

// ------------------------------------------------------------------- Tent

Matrix tent_step(TentState& state, const FeatureBatch& batch, std::size_t batch_index, TentStepInfo* info) {
  const SgdHyper hyper{state.config.lr, state.config.momentum, 0.0};
  for (std::size_t s = 0; s < state.config.steps; ++s) {
    auto obj = tent_objective(state.head, batch.z);
    if (!std::isfinite(obj.loss)) throw AdaptationError(batch_index, "tent: non-finite entropy loss");
    if (info) info->loss = obj.loss;
    const auto grads = param_blocks(std::as_const(obj.grads), ParamSubset::norm_affine_only);
    sgd_momentum_step(param_blocks(state.head, ParamSubset::norm_affine_only), grads, state.opt, hyper);
  }
  ++state.batches_seen;
  Matrix probs = predict_proba(state.head, batch.z);
  if (!all_finite(probs)) throw AdaptationError(batch_index, "tent: non-finite predictions");
  return probs;
}

// -------------------------------------------------------------------- T3A

Matrix t3a_predict(const T3AState& state, const Matrix& h) {
  const std::size_t K = state.prototypes.rows();
  if (h.cols() != state.prototypes.cols()) {
    throw ShapeError("t3a: feature dim " + std::to_string(h.cols()) + " != prototype dim " +
                     std::to_string(state.prototypes.cols()));
  }
  Matrix ct(state.prototypes.cols(), K);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < ct.rows(); ++j) ct(j, k) = state.prototypes(k, j);
  const std::vector<float> zero(K, 0.0f);
  auto [logits, cache] = linear_forward<float>(h, ct, zero);
  return softmax(logits);
}

Matrix t3a_update_and_predict(T3AState& state, const FeatureBatch& batch) {
  auto fwd = head_forward(state.head, batch.z, HeadMode::eval());
  const Matrix& h = fwd.cache.hidden;
  const Matrix base = softmax(fwd.logits);
  const std::size_t K = state.supports.size();
  std::vector<bool> touched(K, false);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    const auto pr = base.row(i);
    const std::size_t k = argmax<float>(pr);
    auto hr = h.row(i);
    state.supports[k].push_back({{hr.begin(), hr.end()}, entropy<float>(pr), false, state.next_seq++});
    touched[k] = true;
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (!touched[k]) continue;
    auto& set = state.supports[k];
    if (set.size() > state.filter_k) {
      std::stable_sort(set.begin(), set.end(), [](const SupportEntry& a, const SupportEntry& b) {
        if (a.anchor != b.anchor) return a.anchor;
        if (a.entropy != b.entropy) return a.entropy < b.entropy;
        return a.seq < b.seq;
      });
      set.resize(state.filter_k);
    }
    recompute_prototype(state, k);
  }
  return t3a_predict(state, h);
}

// ------------------------------------------------------------------- SHOT

namespace {

double cosine_distance(std::span<const float> a, std::span<const double> c, double c_norm) {
  double dot = 0, an = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * c[j];
    an += static_cast<double>(a[j]) * a[j];
  }
  if (an == 0 || c_norm == 0) return 1.0;
  return 1.0 - dot / (std::sqrt(an) * c_norm);
}

struct Centroids {
  std::vector<std::vector<double>> mean;
  std::vector<double> norm;
  std::vector<double> mass;
  std::vector<bool> valid;
};

// Distance ties (within kTie) go to the heavier centroid, then the lower
// class index, so identical features always share a label.
std::vector<int> assign_nearest(const Matrix& x, const Centroids& c) {
  constexpr double kTie = 1e-12;
  bool any = false;
  for (bool v : c.valid) any = any || v;
  if (!any) throw DataError("shot_pseudo_labels: every class has zero weight");
  const std::size_t K = c.mean.size();
  std::vector<int> labels(x.rows(), 0);
  std::vector<double> d(K);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      if (!c.valid[k]) continue;
      d[k] = cosine_distance(x.row(i), c.mean[k], c.norm[k]);
      best = std::min(best, d[k]);
    }
    int arg = -1;
    for (std::size_t k = 0; k < K; ++k) {
      if (!c.valid[k] || d[k] > best + kTie) continue;
      if (arg < 0 || c.mass[k] > c.mass[static_cast<std::size_t>(arg)]) arg = static_cast<int>(k);
    }
    labels[i] = arg;
  }
  return labels;
}

Centroids weighted_centroids(const Matrix& x, std::size_t K,
                             const std::function<double(std::size_t, std::size_t)>& weight) {
  const std::size_t D = x.cols();
  Centroids c{std::vector<std::vector<double>>(K, std::vector<double>(D, 0.0)), std::vector<double>(K, 0.0),
              std::vector<double>(K, 0.0), std::vector<bool>(K, false)};
  auto& mass = c.mass;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xr = x.row(i);
    for (std::size_t k = 0; k < K; ++k) {
      const double w = weight(i, k);
      if (w == 0) continue;
      mass[k] += w;
      for (std::size_t j = 0; j < D; ++j) c.mean[k][j] += w * xr[j];
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (mass[k] <= 0) continue;
    c.valid[k] = true;
    double n = 0;
    for (auto& v : c.mean[k]) {
      v /= mass[k];
      n += v * v;
    }
    c.norm[k] = std::sqrt(n);
  }
  return c;
}

}  // namespace

std::vector<int> shot_pseudo_labels(const Matrix& features, const Matrix& probs, Matrix* centroids_out) {
  if (features.rows() == 0) throw DataError("shot_pseudo_labels: empty target set");
  if (probs.rows() != features.rows()) throw ShapeError("shot_pseudo_labels: features/probs row mismatch");
  const std::size_t K = probs.cols();
  const auto soft = weighted_centroids(features, K, [&](std::size_t i, std::size_t k) { return double(probs(i, k)); });
  const auto round1 = assign_nearest(features, soft);
  const auto hard = weighted_centroids(features, K, [&](std::size_t i, std::size_t k) {
    return round1[i] == static_cast<int>(k) ? 1.0 : 0.0;
  });
  auto labels = assign_nearest(features, hard);
  if (centroids_out) {
    *centroids_out = Matrix(K, features.cols());
    for (std::size_t k = 0; k < K; ++k)
      if (hard.valid[k])
        for (std::size_t j = 0; j < features.cols(); ++j) (*centroids_out)(k, j) = static_cast<float>(hard.mean[k][j]);
  }
  return labels;
}

void shot_offline_adapt(ShotState& state, std::span<const FeatureBatch> batches, std::vector<ShotBatchInfo>* info) {
  std::size_t total = 0;
  for (const auto& b : batches) total += b.size();
  if (total == 0) throw DataError("shot: empty target set");

  // (a) full pass with the unadapted parameters.
  const std::size_t H = state.head.hidden_dim(), K = state.head.num_classes();
  Matrix trunk(total, H), probs(total, K);
  std::size_t row = 0;
  for (const auto& b : batches) {
    auto fwd = head_forward(state.head, b.z, HeadMode::eval());
    const Matrix p = softmax(fwd.logits);
    for (std::size_t i = 0; i < b.size(); ++i, ++row) {
      std::copy_n(fwd.cache.hidden.row(i).begin(), H, trunk.row(row).begin());
      std::copy_n(p.row(i).begin(), K, probs.row(row).begin());
    }
  }
  // (b) pseudo-labels.
  state.pseudo_labels = shot_pseudo_labels(trunk, probs, &state.centroids);

  // (c) one pass of gradient steps on the adapter parameters.
  const SgdHyper hyper{state.config.lr, state.config.momentum, state.config.weight_decay};
  std::size_t offset = 0;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const auto& b = batches[bi];
    std::span<const int> pseudo(state.pseudo_labels.data() + offset, b.size());
    offset += b.size();
    if (b.size() == 0) continue;
    for (std::size_t s = 0; s < state.config.steps; ++s) {
      auto fwd = head_forward(state.head, b.z, HeadMode::eval());
      auto loss = shot_loss(fwd.logits, pseudo, state.config);
      if (!std::isfinite(loss.total)) throw AdaptationError(bi, "shot: non-finite loss");
      if (info && s == 0) info->push_back({loss.total, loss.ent, loss.div, loss.pl});
      auto grads = head_backward(state.head, fwd.cache, loss.dlogits, ParamSubset::adapter_only);
      sgd_momentum_step(param_blocks(state.head, ParamSubset::adapter_only),
                        param_blocks(std::as_const(grads), ParamSubset::adapter_only), state.opt, hyper);
    }
  }
  if (hash_classifier(state.head) != state.classifier_hash) {
    throw ContractError("shot: classifier parameters changed during adaptation");
  }
  state.adapted = true;
}

void shot_offline_adapt(ShotState& state, const Matrix& features, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("shot: batch size must be >= 1");
  std::vector<FeatureBatch> batches;
  for (std::size_t start = 0; start < features.rows(); start += batch_size) {
    const std::size_t n = std::min(batch_size, features.rows() - start);
    Matrix z(n, features.cols());
    for (std::size_t i = 0; i < n; ++i) std::copy_n(features.row(start + i).begin(), features.cols(), z.row(i).begin());
    batches.push_back({std::move(z), "", {}});
  }
  shot_offline_adapt(state, batches);
}

// ------------------------------------------------------------------ driver

nlohmann::json trace_to_json(const BatchTrace& t) {
  nlohmann::json j = {{"batch", t.batch},
                      {"size", t.size},
                      {"mean_entropy", t.mean_entropy},
                      {"pred_marginal", t.pred_marginal}};
  if (t.loss) j["loss"] = *t.loss;
  if (t.loss_ent) j["loss_ent"] = *t.loss_ent;
  if (t.loss_div) j["loss_div"] = *t.loss_div;
  if (t.loss_pl) j["loss_pl"] = *t.loss_pl;
  if (!t.support_sizes.empty()) j["support_sizes"] = t.support_sizes;
  return j;
}

namespace {

double mean_row_entropy(const Matrix& p) {
  if (p.rows() == 0) return 0;
  double s = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) s += entropy<float>(p.row(i));
  return s / static_cast<double>(p.rows());
}

std::vector<double> argmax_shares(const Matrix& p) {
  std::vector<double> m(p.cols(), 0.0);
  for (std::size_t i = 0; i < p.rows(); ++i) m[argmax<float>(p.row(i))] += 1.0;
  if (p.rows() > 0)
    for (auto& v : m) v /= static_cast<double>(p.rows());
  return m;
}

void append_rows(Matrix& dst, std::size_t& at, const Matrix& src) {
  for (std::size_t i = 0; i < src.rows(); ++i, ++at) std::copy_n(src.row(i).begin(), src.cols(), dst.row(at).begin());
}

}  // namespace

AdaptationResult run_adaptation(AdapterState& state, const Encoder& encoder, std::span<const UnlabeledBatch> stream) {
  const HeadParams& head0 = adapted_head(state);
  std::size_t total = 0;
  for (const auto& b : stream) total += b.size();

  std::vector<FeatureBatch> features;
  features.reserve(stream.size());
  AdaptationResult out;
  out.probs = Matrix(total, head0.num_classes());
  out.record_ids.reserve(total);
  for (const auto& b : stream) {
    features.push_back(encoder.encode(b));
    out.record_ids.insert(out.record_ids.end(), b.record_ids().begin(), b.record_ids().end());
  }

  std::size_t at = 0;
  std::visit(overloaded{
                 [&](NoTtaState& s) {
                   for (std::size_t bi = 0; bi < features.size(); ++bi) {
                     Matrix p = predict_proba(s.head, features[bi].z);
                     out.trace.push_back({bi, p.rows(), mean_row_entropy(p), argmax_shares(p), {}, {}, {}, {}, {}});
                     append_rows(out.probs, at, p);
                   }
                 },
                 [&](TentState& s) {
                   for (std::size_t bi = 0; bi < features.size(); ++bi) {
                     TentStepInfo info;
                     Matrix p = tent_step(s, features[bi], bi, &info);
                     out.trace.push_back({bi, p.rows(), mean_row_entropy(p), argmax_shares(p), info.loss, {}, {}, {}, {}});
                     append_rows(out.probs, at, p);
                   }
                 },
                 [&](T3AState& s) {
                   for (std::size_t bi = 0; bi < features.size(); ++bi) {
                     Matrix p = t3a_update_and_predict(s, features[bi]);
                     BatchTrace t{bi, p.rows(), mean_row_entropy(p), argmax_shares(p), {}, {}, {}, {}, {}};
                     for (const auto& set : s.supports) t.support_sizes.push_back(set.size());
                     out.trace.push_back(std::move(t));
                     append_rows(out.probs, at, p);
                   }
                 },
                 [&](ShotState& s) {
                   if (s.adapted) throw ContractError("shot: state has already adapted to a target set");
                   std::vector<ShotBatchInfo> info;
                   shot_offline_adapt(s, features, &info);
                   for (std::size_t bi = 0; bi < features.size(); ++bi) {
                     Matrix p = predict_proba(s.head, features[bi].z);
                     BatchTrace t{bi, p.rows(), mean_row_entropy(p), argmax_shares(p), {}, {}, {}, {}, {}};
                     if (bi < info.size()) {
                       t.loss = info[bi].total;
                       t.loss_ent = info[bi].ent;
                       t.loss_div = info[bi].div;
                       t.loss_pl = info[bi].pl;
                     }
                     out.trace.push_back(std::move(t));
                     append_rows(out.probs, at, p);
                   }
                 },
             },
             state);
  return out;
}

AdaptationResult run_adaptation(const AdapterConfig& config, const Checkpoint& checkpoint, const Encoder& encoder,
                                std::span<const UnlabeledBatch> stream) {
  AdapterState state = adapter_init(config, checkpoint, encoder);
  return run_adaptation(state, encoder, stream);
}

}  // namespace neuroadapt
