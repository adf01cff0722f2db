#pragma once

// Stage 1: supervised training of the shared head on labeled source data with
// the encoder frozen. Model selection only ever looks at the validation split.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "neuroadapt/model.hpp"
#include "neuroadapt/optim.hpp"
#include "neuroadapt/shiftbench.hpp"

namespace neuroadapt {

enum class SelectionMetric { roc_auc, cohen_kappa };

const char* to_string(SelectionMetric m);

struct FinetuneConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 512;
  std::uint64_t seed = 0;
  std::size_t num_classes = 2;
  std::size_t hidden = kDefaultHidden;
  double dropout = kDefaultDropout;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  // ROC-AUC for binary tasks, Cohen's kappa otherwise.
  SelectionMetric selection_metric() const {
    return num_classes == 2 ? SelectionMetric::roc_auc : SelectionMetric::cohen_kappa;
  }
  AdamWHyper adamw() const { return {lr, beta1, beta2, adam_eps, weight_decay}; }
  void validate() const;
};

nlohmann::json finetune_to_json(const FinetuneConfig& c);

struct TrainingLog {
  SelectionMetric metric = SelectionMetric::roc_auc;
  std::vector<double> train_loss;
  std::vector<double> val_metric;
  std::size_t selected_epoch = 0;
};

nlohmann::json training_log_json(const TrainingLog& log);

struct SubjectSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

// Seeded partition of the subjects of `manifest`'s train-split records;
// floor(ratio * n) subjects go to train (clamped to [1, n-1]).
SubjectSplit split_patients(const DatasetManifest& manifest, std::uint64_t seed, double ratio = 0.8);

// Relabels train-split records of subjects in `split.val` as validation.
DatasetManifest apply_subject_split(DatasetManifest manifest, const SubjectSplit& split);

// Earliest epoch attaining the maximum.
std::size_t select_model(std::span<const double> history);
inline std::size_t select_model(const TrainingLog& log) { return select_model(log.val_metric); }

struct TrainResult {
  Checkpoint checkpoint;
  TrainingLog log;
};

// AdamW on cross-entropy with dropout active; validation in eval mode after
// every epoch. Returns the parameters of the selected epoch.
TrainResult train_head(const FinetuneConfig& config, const Encoder& encoder, const LabeledSplit& train,
                       const LabeledSplit& val);

// Checkpoint binary plus `<path>.json` with the training provenance.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt,
                      const nlohmann::json& provenance);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace neuroadapt
