#pragma once

// Classification metrics: exact-match accuracy, macro F1 (zero convention
// for empty classes), and macro one-vs-rest AUC via the mid-rank statistic
// with ties contributing one half.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cerd/errors.hpp"

namespace cerd {

struct EvalMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double macro_auc = 0.0;
  std::vector<std::size_t> auc_skipped_classes;  // classes without both positives and negatives
};

inline double accuracy(const std::vector<std::size_t>& labels,
                       const std::vector<std::size_t>& predictions) {
  if (labels.size() != predictions.size() || labels.empty())
    throw ContractError("accuracy: labels/predictions size mismatch or empty");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += labels[i] == predictions[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline double macro_f1(const std::vector<std::size_t>& labels,
                       const std::vector<std::size_t>& predictions, std::size_t classes) {
  if (labels.size() != predictions.size() || labels.empty())
    throw ContractError("macro_f1: labels/predictions size mismatch or empty");
  double total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool truth = labels[i] == c, pred = predictions[i] == c;
      tp += (truth && pred) ? 1 : 0;
      fp += (!truth && pred) ? 1 : 0;
      fn += (truth && !pred) ? 1 : 0;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    total += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return total / static_cast<double>(classes);
}

// One-vs-rest ranking AUC for one score column using mid-ranks.
inline double binary_rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::size_t npos = 0;
  for (bool p : positive) npos += p ? 1 : 0;
  const std::size_t nneg = n - npos;
  if (npos == 0 || nneg == 0) throw ContractError("auc: needs both positives and negatives");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (positive[order[k]]) rank_sum += mid_rank;
    i = j + 1;
  }
  return (rank_sum - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1)) /
         (static_cast<double>(npos) * static_cast<double>(nneg));
}

// Unweighted mean of per-class one-vs-rest AUCs; classes lacking positives
// or negatives are excluded and reported back to the caller.
inline double macro_ovr_auc(const std::vector<std::size_t>& labels, const std::vector<double>& scores,
                            std::size_t classes, std::vector<std::size_t>* skipped = nullptr) {
  const std::size_t n = labels.size();
  if (n == 0 || scores.size() != n * classes)
    throw ContractError("macro_ovr_auc: scores must be subjects x classes");
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t npos = 0;
    for (std::size_t i = 0; i < n; ++i) npos += labels[i] == c ? 1 : 0;
    if (npos == 0 || npos == n) {
      if (skipped != nullptr) skipped->push_back(c);
      continue;
    }
    std::vector<double> col(n);
    std::vector<bool> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores[i * classes + c];
      pos[i] = labels[i] == c;
    }
    total += binary_rank_auc(col, pos);
    ++used;
  }
  if (used == 0) throw ContractError("macro_ovr_auc: no class has both positives and negatives");
  return total / static_cast<double>(used);
}

// Argmax prediction with ties to the lower class index.
inline std::vector<std::size_t> argmax_predictions(const std::vector<double>& scores, std::size_t n,
                                                   std::size_t classes) {
  std::vector<std::size_t> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (scores[i * classes + c] > scores[i * classes + best]) best = c;
    pred[i] = best;
  }
  return pred;
}

inline EvalMetrics compute_metrics(const std::vector<std::size_t>& labels,
                                   const std::vector<double>& scores, std::size_t classes) {
  EvalMetrics m;
  const auto predictions = argmax_predictions(scores, labels.size(), classes);
  m.accuracy = accuracy(labels, predictions);
  m.macro_f1 = macro_f1(labels, predictions, classes);
  m.macro_auc = macro_ovr_auc(labels, scores, classes, &m.auc_skipped_classes);
  return m;
}

}  // namespace cerd
