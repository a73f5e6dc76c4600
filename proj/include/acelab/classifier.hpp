#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "acelab/data.hpp"
#include "acelab/metrics.hpp"
#include "acelab/nn.hpp"
#include "acelab/parallel.hpp"

namespace acelab {

struct ClassifierConfig {
  std::size_t input_dim = 2;
  std::size_t hidden = 64;
  std::size_t num_classes = 2;
  double dropout = 0.1;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  std::size_t ece_bins = 15;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
};

enum class Mode {
  train,       // batch statistics, dropout active
  eval,        // running statistics, no dropout
  mc_dropout,  // running statistics, dropout active
};

/// MLP classifier: Dense(d,h) BN ReLU Dropout Dense(h,h) BN ReLU Dense(h,K).
class Classifier {
 public:
  struct Output {
    Tensor logits;       // [n x K]
    Tensor penultimate;  // [n x h], activations feeding the head
  };

  Classifier() = default;

  Classifier(const ClassifierConfig& cfg, Rng& rng)
      : fc1_(cfg.input_dim, cfg.hidden, Init::he_uniform, rng),
        bn1_(cfg.hidden, cfg.bn_momentum, cfg.bn_eps),
        drop_{cfg.dropout},
        fc2_(cfg.hidden, cfg.hidden, Init::he_uniform, rng),
        bn2_(cfg.hidden, cfg.bn_momentum, cfg.bn_eps),
        head_(cfg.hidden, cfg.num_classes, Init::xavier_uniform, rng),
        num_classes_(cfg.num_classes) {
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ContractError("dropout rate outside [0,1)");
  }

  /// Forward pass; Mode::train updates BatchNorm running statistics.
  Output forward(const Tensor& x, Mode mode, Rng* rng = nullptr) {
    if (mode == Mode::eval) return std::as_const(*this).forward(x);
    if (mode == Mode::mc_dropout) return std::as_const(*this).forward(x, rng);
    const bool batch_stats = true;
    const bool dropout = true;
    Tensor h = relu(bn1_.forward(fc1_.forward(x), batch_stats));
    h = drop_.forward(h, dropout, rng);
    const Tensor pen = relu(bn2_.forward(fc2_.forward(h), batch_stats));
    return {head_.forward(pen), pen};
  }

  /// Frozen-statistics forward; never mutates the model. Passing an rng turns
  /// dropout on (Mode::mc_dropout).
  Output forward(const Tensor& x, Rng* dropout_rng = nullptr) const {
    Tensor h = relu(bn1_.forward_eval(fc1_.forward(x)));
    h = drop_.forward(h, dropout_rng != nullptr, dropout_rng);
    const Tensor pen = relu(bn2_.forward_eval(fc2_.forward(h)));
    return {head_.forward(pen), pen};
  }

  Tensor logits(const Tensor& x) const { return forward(x).logits; }

  Tensor predict_proba(const Tensor& x) const {
    NoGradGuard no_grad;
    return softmax(logits(x));
  }

  std::vector<std::size_t> predict(const Tensor& x) const { return argmax_rows(predict_proba(x)); }

  std::size_t num_classes() const { return num_classes_; }
  std::size_t input_dim() const { return fc1_.in_features(); }
  std::size_t hidden() const { return fc1_.out_features(); }
  double dropout_rate() const { return drop_.rate; }
  void set_dropout_rate(double r) { drop_.rate = r; }

  /// Parameters and buffers in persistence order.
  ParameterList state() const {
    ParameterList out;
    fc1_.collect("fc1", out);
    bn1_.collect("bn1", out);
    fc2_.collect("fc2", out);
    bn2_.collect("bn2", out);
    head_.collect("head", out);
    return out;
  }

  std::vector<Tensor> parameters() const { return trainable(state()); }

  /// Stops (or resumes) gradient tracking for all trainable parameters.
  void set_frozen(bool frozen) const { set_trainable(state(), !frozen); }

  Classifier clone() const {
    Classifier c;
    c.fc1_ = fc1_.clone();
    c.bn1_ = bn1_.clone();
    c.drop_ = drop_;
    c.fc2_ = fc2_.clone();
    c.bn2_ = bn2_.clone();
    c.head_ = head_.clone();
    c.num_classes_ = num_classes_;
    return c;
  }

 private:
  Dense fc1_;
  BatchNorm bn1_;
  Dropout drop_;
  Dense fc2_;
  BatchNorm bn2_;
  Dense head_;
  std::size_t num_classes_ = 2;
};

/// Per-epoch training record and the checkpoint chosen from it.
struct TrainReport {
  std::vector<double> train_loss;
  std::vector<double> test_accuracy;
  std::vector<double> test_ece;
  std::size_t selected_epoch = 0;  // 1-based; 0 means the untouched starting weights
};

/// Mean over the batch of -sum_k target_k log softmax(logits)_k.
inline Tensor soft_cross_entropy_logits(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("soft cross-entropy: logits " + shape_str(logits.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  return -sum(target * log_softmax(logits)) * (1.0 / static_cast<double>(logits.rows()));
}

inline Tensor one_hot(const std::vector<int>& labels, std::size_t k) {
  std::vector<double> v(labels.size() * k, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ContractError("label " + std::to_string(labels[i]) + " outside 0.." +
                          std::to_string(k - 1));
    }
    v[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor(Shape{labels.size(), k}, std::move(v));
}

/// Picks among the final 20% of epochs the lowest-ECE checkpoint whose accuracy
/// is within `tolerance` of the best accuracy seen in any epoch. Falls back to
/// the most accurate window epoch when none qualifies. Returns a 1-based epoch.
inline std::size_t select_checkpoint(const TrainReport& r, double tolerance = 0.005) {
  const std::size_t e = r.test_accuracy.size();
  if (e == 0) return 0;
  const auto window = static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(e)));
  const std::size_t first = e - std::max<std::size_t>(window, 1);
  const double best = *std::max_element(r.test_accuracy.begin(), r.test_accuracy.end());
  std::size_t chosen = e;
  double chosen_ece = std::numeric_limits<double>::infinity();
  for (std::size_t i = first; i < e; ++i) {
    if (r.test_accuracy[i] + 1e-12 < best - tolerance) continue;
    if (r.test_ece[i] < chosen_ece) {
      chosen_ece = r.test_ece[i];
      chosen = i + 1;
    }
  }
  if (!std::isfinite(chosen_ece)) {
    double acc = -1.0;
    for (std::size_t i = first; i < e; ++i)
      if (r.test_accuracy[i] > acc) {
        acc = r.test_accuracy[i];
        chosen = i + 1;
      }
  }
  return chosen;
}

struct FitOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  AdamConfig adam{};
  std::size_t ece_bins = 15;
};

/// Minimizes soft-target cross-entropy with Adam on shuffled mini-batches.
/// When `eval` is given, every epoch is scored on it and the weights of the
/// checkpoint picked by select_checkpoint() are restored at the end.
inline TrainReport fit_soft_targets(Classifier& model, const Tensor& features,
                                    const Tensor& targets, const LabeledSet* eval,
                                    const FitOptions& opt, Rng& rng) {
  const std::size_t n = features.rows();
  if (targets.rows() != n || targets.cols() != model.num_classes()) {
    throw ShapeError("fit: targets " + shape_str(targets.shape()) + " do not match " +
                     std::to_string(n) + " samples of " + std::to_string(model.num_classes()) +
                     " classes");
  }
  TrainReport report;
  if (opt.epochs == 0 || n == 0) return report;
  model.set_frozen(false);
  Adam adam(model.parameters(), opt.adam);
  const std::size_t d = features.cols(), k = targets.cols();
  const auto window = std::max<std::size_t>(
      static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(opt.epochs))), 1);
  std::vector<std::vector<double>> snapshots;  // flattened state for window epochs
  const auto fv = features.values();
  const auto tv = targets.values();
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto order = permutation(rng, n);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += opt.batch_size) {
      const std::size_t b = std::min(opt.batch_size, n - start);
      if (b < 2 && n >= 2) continue;  // BatchNorm needs two rows
      std::vector<double> xb(b * d), yb(b * k);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t src = order[start + i];
        std::copy_n(fv.begin() + static_cast<long>(src * d), d, xb.begin() + static_cast<long>(i * d));
        std::copy_n(tv.begin() + static_cast<long>(src * k), k, yb.begin() + static_cast<long>(i * k));
      }
      const Tensor x(Shape{b, d}, std::move(xb));
      const Tensor y(Shape{b, k}, std::move(yb));
      const Tensor loss = soft_cross_entropy_logits(model.forward(x, Mode::train, &rng).logits, y);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw TrainingDiverged("classifier training diverged at epoch " +
                               std::to_string(epoch + 1) + " (loss " + std::to_string(lv) + ")");
      }
      backward(loss);
      adam.step();
      loss_sum += lv;
      ++batches;
    }
    report.train_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
    if (eval != nullptr) {
      const Tensor p = model.predict_proba(eval->features);
      report.test_accuracy.push_back(accuracy(p, eval->labels));
      report.test_ece.push_back(ece(p, eval->labels, opt.ece_bins));
      if (epoch + window >= opt.epochs) {
        std::vector<double> flat;
        for (const auto& t : model.state()) flat.insert(flat.end(), t.tensor.values().begin(), t.tensor.values().end());
        snapshots.push_back(std::move(flat));
      }
    }
  }
  if (eval != nullptr) {
    report.selected_epoch = select_checkpoint(report);
    const std::size_t snap = report.selected_epoch - (opt.epochs - snapshots.size()) - 1;
    const auto& flat = snapshots.at(snap);
    std::size_t off = 0;
    for (const auto& t : model.state()) {
      Tensor dst = t.tensor;
      auto v = dst.mutable_values();
      std::copy_n(flat.begin() + static_cast<long>(off), v.size(), v.begin());
      off += v.size();
    }
  } else {
    report.selected_epoch = opt.epochs;
  }
  return report;
}

struct TrainedClassifier {
  Classifier model;
  TrainReport report;
};

/// Trains a fresh classifier with hard-label cross-entropy.
inline TrainedClassifier train_classifier(const LabeledSet& data, const LabeledSet* eval,
                                          const ClassifierConfig& cfg, Rng& rng) {
  ClassifierConfig c = cfg;
  c.input_dim = data.dim();
  Rng init_rng = rng.child("init");
  Rng train_rng = rng.child("train");
  Classifier model(c, init_rng);
  const FitOptions opt{cfg.epochs, cfg.batch_size, cfg.adam, cfg.ece_bins};
  TrainReport report =
      fit_soft_targets(model, data.features, one_hot(data.labels, cfg.num_classes), eval, opt, train_rng);
  model.set_frozen(true);
  return {std::move(model), std::move(report)};
}

/// Natural-log entropy of each probability row.
inline std::vector<double> predictive_entropy(const Tensor& probs) {
  const std::size_t n = probs.rows(), k = probs.cols();
  const auto v = probs.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0, h = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = v[i * k + j];
      s += p;
      h -= p * std::log(p + kLogEps);
    }
    if (std::fabs(s - 1.0) > 1e-6) {
      throw ContractError("predictive_entropy: row " + std::to_string(i) + " sums to " +
                          std::to_string(s));
    }
    out[i] = std::max(h, 0.0);
  }
  return out;
}

/// Mean softmax over T stochastic passes with dropout active and BatchNorm frozen.
inline Tensor mc_dropout_proba(const Classifier& model, const Tensor& x, std::size_t samples,
                               Rng& rng) {
  if (samples == 0) throw ContractError("mc_dropout_proba: T must be >= 1");
  NoGradGuard no_grad;
  std::vector<double> acc(x.rows() * model.num_classes(), 0.0);
  for (std::size_t t = 0; t < samples; ++t) {
    const Tensor p = softmax(model.forward(x, &rng).logits);
    const auto pv = p.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += pv[i];
  }
  for (auto& a : acc) a /= static_cast<double>(samples);
  return Tensor(Shape{x.rows(), model.num_classes()}, std::move(acc));
}

/// Indices of the ceil(q*n) highest scores; ties broken by ascending index.
inline std::vector<std::size_t> top_fraction_indices(const std::vector<double>& scores, double q) {
  const std::size_t n = scores.size();
  const auto count = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Pseudo-labels ambiguous in-distribution samples: the top-q fraction of the
/// test set by MC-Dropout predictive entropy.
inline std::vector<std::size_t> label_aid(const Classifier& model, const LabeledSet& test,
                                          double q, std::size_t mc_samples, Rng& rng) {
  if (q < 0.05 - 1e-12 || q > 0.10 + 1e-12) throw ContractError("label_aid: q outside [0.05, 0.10]");
  const auto pe = predictive_entropy(mc_dropout_proba(model, test.features, mc_samples, rng));
  return top_fraction_indices(pe, q);
}

/// Arithmetic mean of member probabilities.
struct EnsembleClassifier {
  std::vector<Classifier> members;

  Tensor predict_proba(const Tensor& x) const {
    if (members.empty()) throw ContractError("empty ensemble");
    std::vector<double> acc(x.rows() * members.front().num_classes(), 0.0);
    for (const auto& m : members) {
      const auto p = m.predict_proba(x);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.values()[i];
    }
    for (auto& a : acc) a /= static_cast<double>(members.size());
    return Tensor(Shape{x.rows(), members.front().num_classes()}, std::move(acc));
  }
};

inline EnsembleClassifier train_ensemble(const LabeledSet& data, const LabeledSet* eval,
                                         const ClassifierConfig& cfg,
                                         const std::vector<std::uint64_t>& seeds,
                                         std::vector<TrainReport>* reports = nullptr) {
  if (seeds.size() < 2) throw ContractError("train_ensemble: need at least two members");
  std::vector<TrainedClassifier> trained(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    Rng rng(seeds[i]);
    trained[i] = train_classifier(data, eval, cfg, rng);
  });
  EnsembleClassifier e;
  for (auto& t : trained) {
    e.members.push_back(std::move(t.model));
    if (reports) reports->push_back(std::move(t.report));
  }
  return e;
}

}  // namespace acelab
