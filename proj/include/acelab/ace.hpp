#pragma once

// Augmentation by counterfactual explanation: PCE outputs paired with their
// conditions as soft labels, mixed with real samples for a short fine-tune.

#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "acelab/classifier.hpp"
#include "acelab/pce.hpp"

namespace acelab {

struct AugmentedSample {
  std::vector<double> x_hat;
  Condition soft_label;
  std::size_t source_index = 0;
  double u = 0.0;  // drawn value of c[k]
};

struct AugmentedSet {
  std::vector<AugmentedSample> samples;

  std::size_t size() const { return samples.size(); }

  Tensor features() const {
    if (samples.empty()) throw ContractError("empty augmented set");
    const std::size_t d = samples.front().x_hat.size();
    std::vector<double> v;
    v.reserve(samples.size() * d);
    for (const auto& s : samples) v.insert(v.end(), s.x_hat.begin(), s.x_hat.end());
    return Tensor(Shape{samples.size(), d}, std::move(v));
  }

  Tensor soft_labels() const {
    std::vector<Condition> cs;
    cs.reserve(samples.size());
    for (const auto& s : samples) cs.push_back(s.soft_label);
    return stack_conditions(cs);
  }
};

/// Random fraction of the training set used as augmentation source.
inline LabeledSet select_source(const LabeledSet& train, double fraction, Rng& rng) {
  if (fraction <= 0.0 || fraction > 1.0) throw ContractError("source fraction outside (0,1]");
  auto idx = permutation(rng, train.size());
  idx.resize(std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.size())))));
  std::sort(idx.begin(), idx.end());
  return train.subset(idx);
}

/// m augmentations per source sample and counterfactual class. The original
/// class k is f's prediction; every other class serves as k_c in turn.
inline AugmentedSet generate_ace(const PCE& pce, const Classifier& f, const LabeledSet& source,
                                 std::size_t m, Rng& rng) {
  if (m == 0) throw ContractError("generate_ace: m must be >= 1");
  NoGradGuard no_grad;
  const std::size_t n = source.size(), d = source.dim(), k_classes = f.num_classes();
  const auto pred = f.predict(source.features);
  AugmentedSet out;
  std::vector<double> rows;
  std::vector<Condition> conds;
  const auto fv = source.features.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k_c = 0; k_c < k_classes; ++k_c) {
      if (k_c == pred[i]) continue;
      for (std::size_t j = 0; j < m; ++j) {
        const double u = rng.uniform();
        conds.push_back(make_condition(k_classes, pred[i], k_c, u));
        rows.insert(rows.end(), fv.begin() + static_cast<long>(i * d),
                    fv.begin() + static_cast<long>((i + 1) * d));
        out.samples.push_back({{}, conds.back(), i, u});
      }
    }
  }
  const std::size_t total = conds.size();
  const Tensor x_hat = pce.generate(Tensor(Shape{total, d}, std::move(rows)), stack_conditions(conds));
  const auto xv = x_hat.values();
  for (std::size_t r = 0; r < total; ++r)
    out.samples[r].x_hat.assign(xv.begin() + static_cast<long>(r * d),
                                xv.begin() + static_cast<long>((r + 1) * d));
  return out;
}

/// Columns x0..x{d-1}, c0..c{K-1}, source_index, u.
inline void write_augmented_csv(std::ostream& os, const AugmentedSet& a) {
  if (a.samples.empty()) return;
  const std::size_t d = a.samples.front().x_hat.size();
  const std::size_t k = a.samples.front().soft_label.c.size();
  for (std::size_t j = 0; j < d; ++j) os << 'x' << j << ',';
  for (std::size_t j = 0; j < k; ++j) os << 'c' << j << ',';
  os << "source_index,u\n" << std::setprecision(17);
  for (const auto& s : a.samples) {
    for (double v : s.x_hat) os << v << ',';
    for (double v : s.soft_label.c) os << v << ',';
    os << s.source_index << ',' << s.u << '\n';
  }
}

struct MixedDataset {
  SoftLabeledSet data;
  std::size_t real_count = 0;
  std::size_t augmented_count = 0;
  double ratio = 0.0;  // augmented share
};

/// Draws round(ratio * total) augmented and the remaining real samples without
/// replacement, one-hot encodes the real labels, and shuffles the union.
inline MixedDataset build_mixed(const LabeledSet& real, const AugmentedSet& aug, double ratio,
                                std::size_t num_classes, Rng& rng, std::size_t total = 0) {
  if (ratio < 0.0 || ratio > 1.0) throw ContractError("build_mixed: ratio outside [0,1]");
  if (total == 0) total = real.size();
  const auto n_aug = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  const std::size_t n_real = total - n_aug;
  if (n_aug > aug.size()) {
    throw ContractError("build_mixed: need " + std::to_string(n_aug) +
                        " augmented samples but only " + std::to_string(aug.size()) +
                        " are available");
  }
  if (n_real > real.size()) {
    throw ContractError("build_mixed: need " + std::to_string(n_real) +
                        " real samples but only " + std::to_string(real.size()) + " are available");
  }
  const std::size_t d = n_real > 0 ? real.dim() : aug.samples.front().x_hat.size();
  auto real_idx = permutation(rng, real.size());
  real_idx.resize(n_real);
  auto aug_idx = permutation(rng, aug.size());
  aug_idx.resize(n_aug);

  std::vector<std::vector<double>> xs, ys;
  const auto rv = real.features.values();
  for (std::size_t i : real_idx) {
    xs.emplace_back(rv.begin() + static_cast<long>(i * d), rv.begin() + static_cast<long>((i + 1) * d));
    std::vector<double> y(num_classes, 0.0);
    y.at(static_cast<std::size_t>(real.labels[i])) = 1.0;
    ys.push_back(std::move(y));
  }
  for (std::size_t i : aug_idx) {
    xs.push_back(aug.samples[i].x_hat);
    ys.push_back(aug.samples[i].soft_label.c);
  }
  const auto order = permutation(rng, total);
  std::vector<double> fx, fy;
  for (std::size_t i : order) {
    fx.insert(fx.end(), xs[i].begin(), xs[i].end());
    fy.insert(fy.end(), ys[i].begin(), ys[i].end());
  }
  MixedDataset mixed{{Tensor(Shape{total, d}, std::move(fx)),
                      Tensor(Shape{total, num_classes}, std::move(fy))},
                     n_real,
                     n_aug,
                     ratio};
  mixed.data.validate();
  return mixed;
}

/// Mean over rows of -sum_k target_k log(pred_k). Probabilities are floored
/// at kLogEps before the log, so ordinary values are not shifted at all.
inline Tensor soft_cross_entropy(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) throw ShapeError("soft_cross_entropy: shape mismatch");
  return -sum(target * log(maximum(pred, kLogEps))) * (1.0 / static_cast<double>(pred.rows()));
}

struct FinetuneConfig {
  std::size_t epochs = 8;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t ece_bins = 15;
};

/// Fine-tunes a copy of f on the mixed set; f itself is left untouched.
/// With `eval`, the checkpoint rule of classifier training picks the epoch.
inline TrainedClassifier finetune(const Classifier& f, const MixedDataset& mixed,
                                  const FinetuneConfig& cfg, const LabeledSet* eval, Rng& rng) {
  Classifier model = f.clone();
  AdamConfig adam;
  adam.lr = cfg.lr;
  const FitOptions opt{cfg.epochs, cfg.batch_size, adam, cfg.ece_bins};
  TrainReport report = fit_soft_targets(model, mixed.data.features, mixed.data.soft_labels, eval, opt, rng);
  model.set_frozen(true);
  return {std::move(model), std::move(report)};
}

struct TraversalStep {
  Condition condition;
  Tensor x_hat;  // [n x d]
  Tensor probs;  // classifier output on x_hat
};

/// Sweeps c[k] linearly from 1 down to 0 in `steps` values, moving every row
/// of x from class k toward k_c.
inline std::vector<TraversalStep> traversal(const PCE& pce, const Classifier& f, const Tensor& x,
                                            std::size_t k, std::size_t k_c, std::size_t steps) {
  if (steps < 2) throw ContractError("traversal: need at least two steps");
  NoGradGuard no_grad;
  std::vector<TraversalStep> out;
  for (std::size_t s = 0; s < steps; ++s) {
    const double u = 1.0 - static_cast<double>(s) / static_cast<double>(steps - 1);
    const Condition c = make_condition(f.num_classes(), k, k_c, u);
    const Tensor x_hat = pce.generate(x, stack_conditions(std::vector<Condition>(x.rows(), c)));
    out.push_back({c, x_hat, f.predict_proba(x_hat)});
  }
  return out;
}

/// Share of rows whose f(x_hat)[k] never rises by more than `tolerance`
/// from one sweep step to the next.
inline double monotone_fraction(const std::vector<TraversalStep>& path, std::size_t k,
                                double tolerance = 1e-9) {
  if (path.empty()) return 1.0;
  const std::size_t n = path.front().probs.rows();
  std::size_t good = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = true;
    for (std::size_t s = 1; s < path.size() && ok; ++s)
      ok = path[s].probs.at(i, k) <= path[s - 1].probs.at(i, k) + tolerance;
    good += ok;
  }
  return static_cast<double>(good) / static_cast<double>(n);
}

}  // namespace acelab
