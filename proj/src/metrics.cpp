#include "neuroadapt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "neuroadapt/errors.hpp"
#include "neuroadapt/kernels.hpp"

namespace neuroadapt {

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::int64_t s = 0;
  for (std::size_t j = 0; j < k_; ++j) s += (*this)(truth, j);
  return s;
}

std::int64_t ConfusionMatrix::col_sum(std::size_t pred) const {
  std::int64_t s = 0;
  for (std::size_t i = 0; i < k_; ++i) s += (*this)(i, pred);
  return s;
}

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred,
                                 std::size_t num_classes) {
  if (truth.size() != pred.size()) throw ShapeError("confusion_matrix: length mismatch");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = pred[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= num_classes ||
        static_cast<std::size_t>(p) >= num_classes) {
      throw DataError("confusion_matrix: label out of range at index " + std::to_string(i));
    }
    ++cm(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw UndefinedMetricError("accuracy: no samples");
  std::int64_t diag = 0;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) diag += cm(k, k);
  return static_cast<double>(diag) / static_cast<double>(n);
}

double balanced_accuracy(const ConfusionMatrix& cm) {
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) {
    const auto support = cm.row_sum(k);
    if (support == 0) continue;
    sum += static_cast<double>(cm(k, k)) / static_cast<double>(support);
    ++present;
  }
  if (present == 0) throw UndefinedMetricError("balanced_accuracy: no ground-truth samples");
  return sum / static_cast<double>(present);
}

double cohen_kappa(const ConfusionMatrix& cm) {
  const double n = static_cast<double>(cm.total());
  if (n == 0) throw UndefinedMetricError("cohen_kappa: no samples");
  double po = 0, pe = 0;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) {
    po += static_cast<double>(cm(k, k));
    pe += static_cast<double>(cm.row_sum(k)) * static_cast<double>(cm.col_sum(k));
  }
  po /= n;
  pe /= n * n;
  if (pe == 1.0) return 0.0;
  return (po - pe) / (1.0 - pe);
}

double weighted_f1(const ConfusionMatrix& cm) {
  const double n = static_cast<double>(cm.total());
  if (n == 0) throw UndefinedMetricError("weighted_f1: no samples");
  double acc = 0;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) {
    const auto support = cm.row_sum(k);
    if (support == 0) continue;
    const double tp = static_cast<double>(cm(k, k));
    const double predicted = static_cast<double>(cm.col_sum(k));
    // F1 = 2 tp / (2 tp + fp + fn); zero when tp is zero.
    const double denom = predicted + static_cast<double>(support);
    const double f1 = tp == 0 ? 0.0 : 2.0 * tp / denom;
    acc += f1 * static_cast<double>(support);
  }
  return acc / n;
}

namespace {

struct BinaryCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

BinaryCounts check_binary(std::span<const double> scores, std::span<const int> labels,
                          const char* who) {
  if (scores.size() != labels.size()) throw ShapeError(std::string(who) + ": length mismatch");
  BinaryCounts c;
  for (int y : labels) {
    if (y == 1) ++c.pos;
    else if (y == 0) ++c.neg;
    else throw DataError(std::string(who) + ": labels must be 0/1");
  }
  return c;
}

// Indices sorted by score descending; stable so equal scores keep input order.
std::vector<std::size_t> order_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  const auto c = check_binary(scores, labels, "roc_auc");
  if (c.pos == 0 || c.neg == 0) throw UndefinedMetricError("roc_auc: needs both classes");
  // Walk tie groups from the top: each positive in a group beats every
  // negative seen below it and ties half of the negatives inside it.
  const auto idx = order_desc(scores);
  double wins = 0;
  std::size_t neg_above = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    std::size_t gp = 0, gn = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? gp : gn)++;
      ++j;
    }
    // Positives in this group lose to negatives above, tie with gn.
    wins += static_cast<double>(gp) * (static_cast<double>(c.neg - neg_above - gn) + 0.5 * gn);
    neg_above += gn;
    i = j;
  }
  return wins / (static_cast<double>(c.pos) * static_cast<double>(c.neg));
}

double pr_auc(std::span<const double> scores, std::span<const int> labels) {
  const auto c = check_binary(scores, labels, "pr_auc");
  if (c.pos == 0) throw UndefinedMetricError("pr_auc: needs at least one positive");
  const auto idx = order_desc(scores);
  double ap = 0;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    std::size_t gp = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      if (labels[idx[j]] == 1) ++gp;
      else ++fp;
      ++j;
    }
    tp += gp;
    if (gp > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      ap += precision * static_cast<double>(gp) / static_cast<double>(c.pos);
    }
    i = j;
  }
  return ap;
}

PredictionSet PredictionSet::from_probs(std::vector<int> truth, Matrix probs) {
  PredictionSet s;
  s.predicted.resize(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    s.predicted[i] = static_cast<int>(argmax<float>(probs.row(i)));
  }
  s.truth = std::move(truth);
  s.probs = std::move(probs);
  s.validate();
  return s;
}

void PredictionSet::validate() const {
  if (truth.size() != predicted.size() || probs.rows() != truth.size()) {
    throw ShapeError("prediction set: " + std::to_string(truth.size()) + " labels, " +
                     std::to_string(predicted.size()) + " predictions, " +
                     std::to_string(probs.rows()) + " probability rows");
  }
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    if (static_cast<std::size_t>(predicted[i]) != argmax<float>(probs.row(i))) {
      throw ContractError("prediction set: predicted label disagrees with argmax at row " +
                          std::to_string(i));
    }
  }
}

MetricReport evaluate(const PredictionSet& preds, std::size_t num_classes) {
  preds.validate();
  if (preds.probs.cols() != num_classes) {
    throw ShapeError("evaluate: probabilities have " + std::to_string(preds.probs.cols()) +
                     " columns for a " + std::to_string(num_classes) + "-class task");
  }
  const auto cm = confusion_matrix(preds.truth, preds.predicted, num_classes);
  MetricReport r;
  r.accuracy = accuracy(cm);
  r.balanced_accuracy = balanced_accuracy(cm);
  r.cohen_kappa = cohen_kappa(cm);
  r.weighted_f1 = weighted_f1(cm);
  if (num_classes == 2) {
    std::vector<double> scores(preds.probs.rows());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = preds.probs(i, 1);
    try {
      r.roc_auc = roc_auc(scores, preds.truth);
      r.pr_auc = pr_auc(scores, preds.truth);
    } catch (const UndefinedMetricError&) {
      r.roc_auc.reset();
      r.pr_auc.reset();
    }
  }
  return r;
}

double delta(double metric_tta, double metric_no_tta) { return metric_tta - metric_no_tta; }

Aggregate aggregate(std::span<const double> cells) {
  if (cells.empty()) throw ContractError("aggregate: no cells");
  Aggregate a;
  a.n = cells.size();
  // Sort first so the result does not depend on cell order.
  std::vector<double> v(cells.begin(), cells.end());
  std::sort(v.begin(), v.end());
  double sum = 0;
  for (double x : v) sum += x;
  a.mean = sum / static_cast<double>(a.n);
  if (a.n == 1) {
    a.single = true;
    return a;
  }
  double ss = 0;
  for (double x : v) ss += (x - a.mean) * (x - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
  return a;
}

}  // namespace neuroadapt
