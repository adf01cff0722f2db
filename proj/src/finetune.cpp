#include "neuroadapt/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <utility>

#include "neuroadapt/metrics.hpp"

namespace neuroadapt {

const char* to_string(SelectionMetric m) {
  return m == SelectionMetric::roc_auc ? "roc_auc" : "cohen_kappa";
}

void FinetuneConfig::validate() const {
  if (!(lr > 0) || !(weight_decay >= 0)) throw ConfigError("finetune: lr must be > 0 and weight_decay >= 0");
  if (epochs == 0 || batch_size == 0) throw ConfigError("finetune: epochs and batch_size must be >= 1");
  if (num_classes < 2) throw ConfigError("finetune: num_classes must be >= 2");
  if (hidden == 0) throw ConfigError("finetune: hidden must be >= 1");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("finetune: dropout must be in [0, 1)");
}

nlohmann::json finetune_to_json(const FinetuneConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"hidden", c.hidden},
          {"dropout", c.dropout},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"lr_schedule", "constant"},
          {"layernorm_eps", kLayerNormEps}};
}

nlohmann::json training_log_json(const TrainingLog& log) {
  return {{"selection_metric", to_string(log.metric)},
          {"train_loss", log.train_loss},
          {"val_metric", log.val_metric},
          {"selected_epoch", log.selected_epoch}};
}

SubjectSplit split_patients(const DatasetManifest& manifest, std::uint64_t seed, double ratio) {
  if (!(ratio > 0 && ratio < 1)) throw ConfigError("split_patients: ratio must be in (0, 1)");
  std::set<std::string> unique;
  for (const auto& r : manifest.records) {
    if (r.subject_id.empty()) throw DataError("split_patients: record '" + r.id + "' has no subject id");
    if (r.split == Split::train) unique.insert(r.subject_id);
  }
  if (unique.size() < 2) {
    throw DataError("split_patients: need at least 2 subjects, have " + std::to_string(unique.size()));
  }
  std::vector<std::string> subjects(unique.begin(), unique.end());
  Rng rng = Rng::derive(seed, "split_patients");
  rng.shuffle(subjects.begin(), subjects.end());
  auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(subjects.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, subjects.size() - 1);
  SubjectSplit out;
  out.train.assign(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(subjects.begin() + static_cast<std::ptrdiff_t>(n_train), subjects.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

DatasetManifest apply_subject_split(DatasetManifest manifest, const SubjectSplit& split) {
  const std::set<std::string> val(split.val.begin(), split.val.end());
  for (auto& r : manifest.records) {
    if (r.split == Split::train && val.count(r.subject_id)) r.split = Split::val;
  }
  manifest.validate();
  return manifest;
}

std::size_t select_model(std::span<const double> history) {
  if (history.empty()) throw ContractError("select_model: empty validation history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] > history[best]) best = i;
  return best;
}

namespace {

Matrix gather_rows(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

double validation_metric(const HeadParams& head, const Matrix& features, const std::vector<int>& labels,
                         SelectionMetric metric) {
  auto preds = PredictionSet::from_probs(labels, predict_proba(head, features));
  if (metric == SelectionMetric::roc_auc) {
    std::vector<double> scores(preds.probs.rows());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = preds.probs(i, 1);
    try {
      return roc_auc(scores, labels);
    } catch (const UndefinedMetricError&) {
      throw DataError("validation split holds a single class; ROC-AUC selection is undefined");
    }
  }
  return cohen_kappa(confusion_matrix(labels, preds.predicted, head.num_classes()));
}

void check_labeled(const LabeledSplit& s, Split expected, std::size_t num_classes) {
  if (s.split != expected) {
    throw ContractError(std::string("train_head: expected a ") + to_string(expected) + " split, got " +
                        to_string(s.split));
  }
  if (s.batch.size() == 0) throw DataError(std::string("train_head: empty ") + to_string(expected) + " split");
  if (!s.batch.labels) throw DataError(std::string("train_head: ") + to_string(expected) + " split is unlabeled");
  for (int y : *s.batch.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DataError("train_head: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
  }
}

}  // namespace

TrainResult train_head(const FinetuneConfig& config, const Encoder& encoder, const LabeledSplit& train,
                       const LabeledSplit& val) {
  config.validate();
  check_labeled(train, Split::train, config.num_classes);
  check_labeled(val, Split::val, config.num_classes);

  const Matrix x_train = encoder.encode(train.batch).z;
  const Matrix x_val = encoder.encode(val.batch).z;
  const auto& y_train = *train.batch.labels;
  const auto& y_val = *val.batch.labels;

  Rng init_rng = Rng::derive(config.seed, "head_init");
  HeadParams head = init_head(encoder.feature_dim(), config.num_classes, init_rng, config.hidden, config.dropout);
  std::vector<std::size_t> sizes;
  for (auto b : param_blocks(head, ParamSubset::all_head)) sizes.push_back(b.size());
  OptimizerState opt = OptimizerState::adamw(sizes);
  const AdamWHyper hyper = config.adamw();

  TrainResult result;
  result.log.metric = config.selection_metric();
  HeadParams best = head;
  double best_metric = -std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(x_train.rows());
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = Rng::derive(config.seed, "shuffle", epoch);
    shuffle.shuffle(order.begin(), order.end());
    Rng dropout = Rng::derive(config.seed, "dropout", epoch);

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(start + config.batch_size, order.size());
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      const Matrix xb = gather_rows(x_train, rows);
      batch_labels.clear();
      for (auto r : rows) batch_labels.push_back(y_train[r]);

      auto fwd = head_forward(head, xb, HeadMode::train(dropout));
      auto ce = cross_entropy<float>(fwd.logits, batch_labels);
      if (!std::isfinite(ce.loss)) throw DataError("train_head: non-finite loss in epoch " + std::to_string(epoch));
      loss_sum += static_cast<double>(ce.loss) * static_cast<double>(rows.size());
      auto grads = head_backward(head, fwd.cache, ce.dlogits, ParamSubset::all_head);
      const auto g = param_blocks(std::as_const(grads), ParamSubset::all_head);
      adamw_step(param_blocks(head, ParamSubset::all_head), g, opt, hyper);
    }
    result.log.train_loss.push_back(loss_sum / static_cast<double>(order.size()));
    const double metric = validation_metric(head, x_val, y_val, result.log.metric);
    result.log.val_metric.push_back(metric);
    if (metric > best_metric) {
      best_metric = metric;
      best = head;
    }
  }
  result.log.selected_epoch = select_model(result.log);
  result.checkpoint = {std::move(best), encoder.hash()};
  return result;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt,
                      const nlohmann::json& provenance) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = serialize_checkpoint(ckpt);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("short write to " + path.string());
  }
  auto side = path;
  side += ".json";
  std::ofstream js(side, std::ios::trunc);
  if (!js) throw IoError("cannot write " + side.string());
  js << provenance.dump(1) << '\n';
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace neuroadapt
