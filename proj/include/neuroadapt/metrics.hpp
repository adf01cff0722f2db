#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "neuroadapt/matrix.hpp"

namespace neuroadapt {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes)
      : k_(num_classes), counts_(num_classes * num_classes, 0) {}

  std::size_t num_classes() const { return k_; }
  // Rows are ground truth, columns are predictions.
  std::int64_t operator()(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::int64_t& operator()(std::size_t truth, std::size_t pred) { return counts_[truth * k_ + pred]; }
  std::int64_t total() const;
  std::int64_t row_sum(std::size_t truth) const;
  std::int64_t col_sum(std::size_t pred) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::int64_t> counts_;
};

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred,
                                 std::size_t num_classes);

double accuracy(const ConfusionMatrix& cm);
// Mean recall over classes that occur in the ground truth.
double balanced_accuracy(const ConfusionMatrix& cm);
// p_e == 1 yields 0.
double cohen_kappa(const ConfusionMatrix& cm);
double weighted_f1(const ConfusionMatrix& cm);

// Mann-Whitney: P(score_pos > score_neg) with ties counted as 1/2.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
// Average precision over distinct thresholds, tied scores grouped.
double pr_auc(std::span<const double> scores, std::span<const int> labels);

struct PredictionSet {
  std::vector<int> truth;
  std::vector<int> predicted;
  Matrix probs;  // N x K

  // Predicted labels are the argmax (first index on ties) of each row.
  static PredictionSet from_probs(std::vector<int> truth, Matrix probs);
  void validate() const;
};

struct MetricReport {
  double accuracy = 0;
  double balanced_accuracy = 0;
  double cohen_kappa = 0;
  double weighted_f1 = 0;
  std::optional<double> roc_auc;  // binary tasks only
  std::optional<double> pr_auc;   // binary tasks only
};

// ROC/PR use the class-1 probability. When the target holds a single class
// they are left empty instead of failing the whole report.
MetricReport evaluate(const PredictionSet& preds, std::size_t num_classes);

double delta(double metric_tta, double metric_no_tta);

struct Aggregate {
  double mean = 0;
  double std = 0;      // n - 1 divisor
  std::size_t n = 0;
  bool single = false;  // n == 1, std reported as 0
};

Aggregate aggregate(std::span<const double> cells);

}  // namespace neuroadapt
