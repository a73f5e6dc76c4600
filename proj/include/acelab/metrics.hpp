#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "acelab/errors.hpp"
#include "acelab/tensor.hpp"

namespace acelab {

/// Scores with binary labels; label 1 is the positive class.
struct ScoredBinarySet {
  std::vector<double> scores;
  std::vector<int> labels;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  }
  std::size_t negatives() const { return labels.size() - positives(); }

  void require_both_classes(const char* op) const {
    if (scores.size() != labels.size()) throw ContractError(std::string(op) + ": size mismatch");
    if (positives() == 0 || negatives() == 0) {
      throw ContractError(std::string(op) + ": needs at least one positive and one negative");
    }
  }
};

/// Mann-Whitney statistic P(s_pos > s_neg) + 0.5 P(tie), via average ranks.
inline double auc_roc(const ScoredBinarySet& s) {
  s.require_both_classes("auc_roc");
  const std::size_t n = s.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  // Doubled ranks keep the tie averaging exact in integers.
  long double pos_rank2 = 0.0L;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && s.scores[order[j]] == s.scores[order[i]]) ++j;
    const long double avg2 = static_cast<long double>(i + 1 + j);  // 2 * mean rank
    for (std::size_t t = i; t < j; ++t)
      if (s.labels[order[t]] == 1) pos_rank2 += avg2;
    i = j;
  }
  const auto np = static_cast<long double>(s.positives());
  const auto nn = static_cast<long double>(s.negatives());
  const long double u = pos_rank2 / 2.0L - np * (np + 1.0L) / 2.0L;
  return static_cast<double>(u / (np * nn));
}

/// True-negative rate at the largest threshold t* whose detection rate
/// (positives with score >= t*) reaches `target_tpr`; negatives with
/// score < t* count as true negatives.
inline double tnr_at_tpr(const ScoredBinarySet& s, double target_tpr = 0.95) {
  s.require_both_classes("tnr_at_tpr");
  if (!(target_tpr > 0.0 && target_tpr <= 1.0)) throw ContractError("tnr_at_tpr: target outside (0,1]");
  std::vector<double> pos;
  for (std::size_t i = 0; i < s.scores.size(); ++i)
    if (s.labels[i] == 1) pos.push_back(s.scores[i]);
  std::sort(pos.begin(), pos.end(), std::greater<>());
  const auto needed = static_cast<std::size_t>(
      std::ceil(target_tpr * static_cast<double>(pos.size()) - 1e-9));
  const double threshold = pos[std::max<std::size_t>(needed, 1) - 1];
  std::size_t tn = 0, neg = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    if (s.labels[i] == 1) continue;
    ++neg;
    if (s.scores[i] < threshold) ++tn;
  }
  return static_cast<double>(tn) / static_cast<double>(neg);
}

/// Expected calibration error over `bins` equal-width confidence bins.
/// A confidence c falls in bin ceil(c*bins)-1 (clamped), so bins are (lo, hi].
inline double ece(const Tensor& probs, std::span<const int> labels, std::size_t bins = 15) {
  if (bins == 0) throw ContractError("ece: bins must be >= 1");
  const std::size_t n = probs.rows(), k = probs.cols();
  if (labels.size() != n) throw ContractError("ece: label count mismatch");
  if (n == 0) return 0.0;
  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  const auto v = probs.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * k;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    const double c = row[best];
    auto b = static_cast<long long>(std::ceil(c * static_cast<double>(bins))) - 1;
    b = std::clamp<long long>(b, 0, static_cast<long long>(bins) - 1);
    conf_sum[b] += c;
    acc_sum[b] += static_cast<int>(best) == labels[i] ? 1.0 : 0.0;
    ++count[b];
  }
  double e = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double nb = static_cast<double>(count[b]);
    e += nb / static_cast<double>(n) * std::fabs(acc_sum[b] / nb - conf_sum[b] / nb);
  }
  return e;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& probs) {
  const std::size_t n = probs.rows(), k = probs.cols();
  std::vector<std::size_t> out(n);
  const auto v = probs.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * k;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
  }
  return out;
}

inline double accuracy(const Tensor& probs, std::span<const int> labels) {
  const auto pred = argmax_rows(probs);
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += static_cast<int>(pred[i]) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Whether a high score indicates OOD (entropy-like) or in-distribution (density-like).
enum class ScoreDirection { high_means_ood, high_means_id };

struct DetectionResult {
  double auc = 0.0;
  double tnr_at_tpr95 = 0.0;
};

/// Detection of OOD (positive class) from iD; density-like scores are negated
/// so positives always score high.
inline DetectionResult ood_eval(std::span<const double> scores_id,
                                std::span<const double> scores_ood, ScoreDirection direction,
                                double target_tpr = 0.95) {
  ScoredBinarySet s;
  const double sign = direction == ScoreDirection::high_means_ood ? 1.0 : -1.0;
  for (double x : scores_id) {
    s.scores.push_back(sign * x);
    s.labels.push_back(0);
  }
  for (double x : scores_ood) {
    s.scores.push_back(sign * x);
    s.labels.push_back(1);
  }
  return {auc_roc(s), tnr_at_tpr(s, target_tpr)};
}

}  // namespace acelab
