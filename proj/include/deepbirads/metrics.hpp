// Binary classification metrics: rank-based AUC, ROC curve, thresholded rates.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deepbirads/tensor.hpp"

namespace deepbirads {

struct UndefinedMetricError : std::domain_error {
  using std::domain_error::domain_error;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> class_counts(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw UsageError("metrics: " + std::to_string(scores.size()) + " scores for " + std::to_string(labels.size()) +
                     " labels");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw UsageError("metrics: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  return {pos, labels.size() - pos};
}

}  // namespace detail

/// Mann-Whitney AUC from tie-averaged ranks: P(pos > neg) + 0.5 P(tie).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  auto [n_pos, n_neg] = detail::class_counts(scores, labels);
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("AUC is undefined when only one class is present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum of positives keeps tied (half-integer) ranks exact.
  double twice_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double twice_rank = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) twice_rank_sum += twice_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  const double twice_u = twice_rank_sum - np * (np + 1.0);
  return twice_u / (2.0 * np * nn);
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  bool operator==(const RocPoint&) const = default;
};

/// Sweeps the threshold down through every distinct score, from (0,0) to (1,1).
inline std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const int> labels) {
  auto [n_pos, n_neg] = detail::class_counts(scores, labels);
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("ROC is undefined when only one class is present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tp : fp) += 1;
      ++j;
    }
    pts.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                   static_cast<double>(tp) / static_cast<double>(n_pos)});
    i = j;
  }
  return pts;
}

inline double trapezoid_area(std::span<const RocPoint> pts) {
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
  return area;
}

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct MetricsReport {
  double auc = 0.0;
  double accuracy = 0.0;
  double specificity = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double threshold = 0.5;
  ConfusionCounts counts;
  std::vector<RocPoint> roc;
  // Set when the metric's denominator was zero; the value is then reported as 0.
  bool auc_undefined = false;
  bool specificity_undefined = false;
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool f1_undefined = false;
  std::string auc_error;

  bool any_undefined() const {
    return auc_undefined || specificity_undefined || precision_undefined || recall_undefined || f1_undefined;
  }
};

/// Metric values in the fixed table order: AUC, accuracy, specificity,
/// precision, recall, F1.
inline std::vector<double> metric_values(const MetricsReport& m) {
  return {m.auc, m.accuracy, m.specificity, m.precision, m.recall, m.f1};
}
inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"auc", "accuracy", "specificity", "precision", "recall", "f1"};
  return names;
}

inline MetricsReport metrics_from_counts(const ConfusionCounts& c) {
  MetricsReport m;
  m.counts = c;
  auto ratio = [](std::size_t num, std::size_t den, bool& undefined) {
    undefined = den == 0;
    return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  const std::size_t n = c.tp + c.fp + c.tn + c.fn;
  m.accuracy = n ? static_cast<double>(c.tp + c.tn) / static_cast<double>(n) : 0.0;
  m.specificity = ratio(c.tn, c.tn + c.fp, m.specificity_undefined);
  m.precision = ratio(c.tp, c.tp + c.fp, m.precision_undefined);
  m.recall = ratio(c.tp, c.tp + c.fn, m.recall_undefined);
  m.f1_undefined = m.precision_undefined || m.recall_undefined || m.precision + m.recall == 0.0;
  m.f1 = m.f1_undefined ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

/// Thresholded metrics (prediction = score >= threshold) plus AUC and ROC.
inline MetricsReport compute_metrics(std::span<const double> scores, std::span<const int> labels,
                                     double threshold = 0.5) {
  if (scores.empty()) throw UsageError("compute_metrics: empty input");
  detail::class_counts(scores, labels);
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) (pred ? c.tp : c.fn) += 1;
    else (pred ? c.fp : c.tn) += 1;
  }
  MetricsReport m = metrics_from_counts(c);
  m.threshold = threshold;
  try {
    m.auc = auc(scores, labels);
    m.roc = roc_points(scores, labels);
  } catch (const UndefinedMetricError& e) {
    m.auc = 0.0;
    m.auc_undefined = true;
    m.auc_error = e.what();
  }
  return m;
}

}  // namespace deepbirads
