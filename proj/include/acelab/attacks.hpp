#pragma once

// White-box attacks on the true label: FGSM, DeepFool and Carlini-Wagner L2,
// plus the sweep that scores a model's AUC as the attack grows.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <ostream>
#include <string>
#include <vector>

#include "acelab/classifier.hpp"
#include "acelab/data.hpp"
#include "acelab/metrics.hpp"

namespace acelab {

inline std::vector<std::size_t> as_classes(const std::vector<int>& labels) {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (int y : labels) {
    if (y < 0) throw ContractError("attack: negative label");
    out.push_back(static_cast<std::size_t>(y));
  }
  return out;
}

inline Tensor clip_to(const Tensor& x, const Box& box) {
  const std::size_t d = box.lo.size();
  if (x.cols() != d) throw ShapeError("clip: box dimension mismatch");
  std::vector<double> v(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(v[i], box.lo[i % d], box.hi[i % d]);
  return Tensor(x.shape(), std::move(v));
}

/// Observed per-dimension range widened by `widen` standard deviations.
inline Box data_box(const Tensor& x, double widen = 3.0) {
  const std::size_t n = x.rows(), d = x.cols();
  Box b{std::vector<double>(d, INFINITY), std::vector<double>(d, -INFINITY)};
  std::vector<double> mean(d, 0.0), sq(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double v = x.at(i, j);
      b.lo[j] = std::min(b.lo[j], v);
      b.hi[j] = std::max(b.hi[j], v);
      mean[j] += v;
    }
  for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) sq[j] += (x.at(i, j) - mean[j]) * (x.at(i, j) - mean[j]);
  for (std::size_t j = 0; j < d; ++j) {
    const double s = std::sqrt(sq[j] / static_cast<double>(n));
    b.lo[j] -= widen * s;
    b.hi[j] += widen * s;
  }
  return b;
}

/// Anything that maps a batch to logits. Attacks only need this much.
struct LogitModel {
  std::function<Tensor(const Tensor&)> logits;
  std::size_t num_classes = 2;

  std::vector<std::size_t> predict(const Tensor& x) const { return argmax_rows(logits(x)); }
};

inline LogitModel logit_model(const Classifier& f) {
  return {[&f](const Tensor& x) { return f.logits(x); }, f.num_classes()};
}

namespace detail {

inline Tensor input_leaf(const Tensor& x) {
  Tensor v = x.clone();
  v.set_requires_grad();
  return v;
}

inline void require_finite(const Tensor& g, const char* who) {
  for (double v : g.values())
    if (!std::isfinite(v)) throw AttackError(std::string(who) + ": non-finite gradient");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// FGSM

/// x + eps * sign(grad_x CE(f(x), y)), optionally clipped.
inline Tensor fgsm(const LogitModel& f, const Tensor& x, const std::vector<int>& y, double eps,
                   const std::optional<Box>& clip = std::nullopt) {
  if (eps < 0.0) throw ContractError("fgsm: eps must be >= 0");
  if (eps == 0.0) return clip ? clip_to(x, *clip) : x.clone();
  EnableGradGuard enable;
  const Tensor xv = detail::input_leaf(x);
  const Tensor g = grad(cross_entropy(f.logits(xv), as_classes(y)), {xv})[0];
  detail::require_finite(g, "fgsm");
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    out[i] += eps * s;
  }
  Tensor adv(x.shape(), std::move(out));
  return clip ? clip_to(adv, *clip) : adv;
}

inline Tensor fgsm(const Classifier& f, const Tensor& x, const std::vector<int>& y, double eps,
                   const std::optional<Box>& clip = std::nullopt) {
  return fgsm(logit_model(f), x, y, eps, clip);
}

// ---------------------------------------------------------------------------
// DeepFool

struct DeepFoolResult {
  Tensor x_adv;                         // x + (1 + overshoot) * r
  Tensor perturbation;                  // accumulated r before overshoot
  std::vector<std::size_t> iterations;  // per sample
};

/// Batched DeepFool. Rows already misclassified are returned unchanged; the
/// others take linearized minimal steps toward the closest other class until
/// the overshot point changes label or `max_iter` is spent.
inline DeepFoolResult deepfool_detailed(const LogitModel& f, const Tensor& x,
                                        const std::vector<int>& y, std::size_t max_iter,
                                        double overshoot = 0.02) {
  if (overshoot <= 0.0) throw ContractError("deepfool: overshoot must be > 0");
  const std::size_t n = x.rows(), d = x.cols(), k_classes = f.num_classes;
  const auto labels = as_classes(y);
  std::vector<double> r(n * d, 0.0);
  std::vector<std::size_t> iters(n, 0);
  std::vector<bool> active(n);
  auto current = [&] {
    std::vector<double> v(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += (1.0 + overshoot) * r[i];
    return Tensor(x.shape(), std::move(v));
  };
  {
    const auto pred = f.predict(x);
    for (std::size_t i = 0; i < n; ++i) active[i] = pred[i] == labels[i];
  }
  EnableGradGuard enable;
  for (std::size_t it = 0; it < max_iter; ++it) {
    const Tensor xi = detail::input_leaf(current());
    const Tensor z = f.logits(xi);
    {
      const auto pred = argmax_rows(z);
      for (std::size_t i = 0; i < n; ++i)
        if (active[i] && pred[i] != labels[i]) active[i] = false;
    }
    if (std::none_of(active.begin(), active.end(), [](bool a) { return a; })) break;
    const Tensor z_true = gather_cols(z, labels);
    std::vector<double> best_ratio(n, INFINITY), best_f(n, 0.0);
    std::vector<std::vector<double>> best_w(n);
    for (std::size_t j = 0; j < k_classes; ++j) {
      const Tensor diff = gather_cols(z, std::vector<std::size_t>(n, j)) - z_true;  // [n x 1]
      const Tensor w = grad(sum(diff), {xi})[0];  // rows are independent in eval mode
      detail::require_finite(w, "deepfool");
      for (std::size_t i = 0; i < n; ++i) {
        if (!active[i] || j == labels[i]) continue;
        double norm2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) norm2 += w[i * d + c] * w[i * d + c];
        if (norm2 == 0.0) continue;
        const double ratio = std::fabs(diff[i]) / std::sqrt(norm2);
        if (ratio < best_ratio[i]) {
          best_ratio[i] = ratio;
          best_f[i] = diff[i];
          best_w[i].assign(w.values().begin() + static_cast<long>(i * d),
                           w.values().begin() + static_cast<long>((i + 1) * d));
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      if (best_w[i].empty()) {  // flat logits: no direction to follow
        active[i] = false;
        continue;
      }
      double norm2 = 0.0;
      for (double v : best_w[i]) norm2 += v * v;
      const double scale = std::fabs(best_f[i]) / norm2;
      for (std::size_t c = 0; c < d; ++c) r[i * d + c] += scale * best_w[i][c];
      ++iters[i];
    }
  }
  return {current(), Tensor(x.shape(), r), std::move(iters)};
}

inline DeepFoolResult deepfool_detailed(const Classifier& f, const Tensor& x,
                                        const std::vector<int>& y, std::size_t max_iter,
                                        double overshoot = 0.02) {
  return deepfool_detailed(logit_model(f), x, y, max_iter, overshoot);
}

template <class Model>
Tensor deepfool(const Model& f, const Tensor& x, const std::vector<int>& y,
                       std::size_t max_iter, double overshoot = 0.02) {
  return deepfool_detailed(f, x, y, max_iter, overshoot).x_adv;
}

// ---------------------------------------------------------------------------
// Carlini-Wagner L2

struct CwConfig {
  double c = 1.0;
  double lr = 0.01;
  double kappa = 0.0;
};

struct CwResult {
  Tensor x_adv;
  std::vector<double> best_loss;      // per sample
  std::vector<double> loss_history;   // sum of per-sample best losses after each iteration
};

/// Per-row loss ||x_adv - x||^2 + c * max(z_y - max_{j != y} z_j, -kappa).
inline Tensor cw_objective(const LogitModel& f, const Tensor& x_adv, const Tensor& x,
                           const std::vector<std::size_t>& labels, const CwConfig& cfg) {
  const Tensor z = f.logits(x_adv);
  std::vector<std::size_t> rival(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double best = -INFINITY;
    for (std::size_t j = 0; j < z.cols(); ++j)
      if (j != labels[i] && z.at(i, j) > best) {
        best = z.at(i, j);
        rival[i] = j;
      }
  }
  const Tensor margin = gather_cols(z, labels) - gather_cols(z, rival);
  const Tensor dist = sum_rows(square(x_adv - x));
  return dist + maximum(margin, -cfg.kappa) * cfg.c;
}

/// Gradient descent in tanh space, x_adv = lo + (hi - lo)(tanh(w) + 1)/2,
/// keeping each row's lowest-loss iterate. The start point is x itself. When
/// `snapshots` is given, the best iterate after each count in `marks` is
/// recorded there, so one long run serves a whole iteration grid.
inline CwResult carlini_wagner(const LogitModel& f, const Tensor& x, const std::vector<int>& y,
                               const CwConfig& cfg, std::size_t iters, const Box& box,
                               const std::vector<std::size_t>& marks = {},
                               std::vector<Tensor>* snapshots = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  if (box.lo.size() != d) throw ShapeError("carlini_wagner: box dimension mismatch");
  const auto labels = as_classes(y);
  std::vector<double> lo(n * d), span(n * d), w0(n * d);
  for (std::size_t i = 0; i < n * d; ++i) {
    const std::size_t j = i % d;
    lo[i] = box.lo[j];
    span[i] = box.hi[j] - box.lo[j];
    const double t = std::clamp(2.0 * (x[i] - lo[i]) / span[i] - 1.0, -1.0 + 1e-12, 1.0 - 1e-12);
    w0[i] = std::atanh(t);
  }
  const Tensor lo_t(x.shape(), lo), span_t(x.shape(), span);
  auto to_input = [&](const Tensor& w) { return lo_t + span_t * ((tanh(w) + 1.0) * 0.5); };

  CwResult res;
  std::vector<double> best_x(x.values().begin(), x.values().end());
  auto snap = [&](std::size_t t) {
    if (!snapshots) return;
    for (std::size_t m : marks)
      if (m == t) snapshots->push_back(Tensor(x.shape(), best_x));
  };
  {
    NoGradGuard no_grad;
    const Tensor l = cw_objective(f, x, x, labels, cfg);
    res.best_loss.assign(l.values().begin(), l.values().end());
  }
  snap(0);
  Tensor w(x.shape(), w0);
  w.set_requires_grad();
  EnableGradGuard enable;
  for (std::size_t it = 0; it < iters; ++it) {
    const Tensor xa = to_input(w);
    const Tensor per_row = cw_objective(f, xa, x, labels, cfg);
    const Tensor g = grad(sum(per_row), {w})[0];
    detail::require_finite(g, "carlini_wagner");
    auto wv = w.mutable_values();
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] -= cfg.lr * g[i];
    // score the new iterate
    NoGradGuard no_grad;
    const Tensor xn = to_input(w);
    const Tensor ln = cw_objective(f, xn, x, labels, cfg);
    for (std::size_t i = 0; i < n; ++i) {
      if (ln[i] < res.best_loss[i]) {
        res.best_loss[i] = ln[i];
        std::copy_n(xn.values().begin() + static_cast<long>(i * d), d,
                    best_x.begin() + static_cast<long>(i * d));
      }
    }
    double total = 0.0;
    for (double v : res.best_loss) total += v;
    res.loss_history.push_back(total);
    snap(it + 1);
  }
  res.x_adv = Tensor(x.shape(), std::move(best_x));
  return res;
}

inline CwResult carlini_wagner(const Classifier& f, const Tensor& x, const std::vector<int>& y,
                               const CwConfig& cfg, std::size_t iters, const Box& box) {
  return carlini_wagner(logit_model(f), x, y, cfg, iters, box);
}

// ---------------------------------------------------------------------------
// Robustness sweep

enum class AttackKind { fgsm, deepfool, deepfool_best, cw };

inline const char* attack_name(AttackKind a) {
  switch (a) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::deepfool: return "deepfool";
    case AttackKind::deepfool_best: return "deepfool-best";
    case AttackKind::cw: return "cw";
  }
  return "?";
}

struct AttackConfig {
  std::vector<double> fgsm_eps{0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.14,
                               0.16, 0.18, 0.20, 0.22, 0.24, 0.26, 0.28, 0.30};
  std::vector<std::size_t> cw_iters{0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  std::vector<std::size_t> deepfool_iters{0, 1, 2, 5, 10, 20, 50};
  CwConfig cw{};
  std::vector<double> cw_kappas{0.0, 5.0};
  double deepfool_overshoot = 0.02;
  std::optional<Box> clip;  // FGSM/DeepFool clip; none by default

  void validate() const {
    for (double e : fgsm_eps)
      if (e < 0.0) throw ContractError("attack config: negative eps");
    for (double k : cw_kappas)
      if (k < 0.0) throw ContractError("attack config: negative kappa");
    if (deepfool_overshoot <= 0.0) throw ContractError("attack config: overshoot must be > 0");
  }
};

struct SweepRow {
  std::string model;
  std::string attack;
  double magnitude = 0.0;
  double auc = 0.0;
};

struct NamedModel {
  std::string name;
  const Classifier* model = nullptr;
};

/// AUC of the class-1 probability against the true binary labels.
inline double score_auc(const Classifier& f, const Tensor& x, const std::vector<int>& y) {
  if (f.num_classes() != 2) throw ContractError("score_auc: binary classifiers only");
  const Tensor p = f.predict_proba(x);
  ScoredBinarySet s;
  for (std::size_t i = 0; i < y.size(); ++i) {
    s.scores.push_back(p.at(i, 1));
    s.labels.push_back(y[i]);
  }
  return auc_roc(s);
}

/// For each model and magnitude: attack the whole test set against that model
/// and record the AUC on the adversarial set. `cw_box` is the CW box.
inline std::vector<SweepRow> robustness_sweep(const std::vector<NamedModel>& models,
                                              AttackKind kind, const AttackConfig& cfg,
                                              const LabeledSet& test, const Box& cw_box,
                                              double cw_kappa = 0.0) {
  cfg.validate();
  std::vector<SweepRow> rows;
  for (const auto& m : models) {
    const Classifier& f = *m.model;
    std::string label = attack_name(kind);
    if (kind == AttackKind::cw) {
      std::ostringstream os;
      os << "cw-k" << cw_kappa;
      label = os.str();
    }
    switch (kind) {
      case AttackKind::fgsm:
        for (double eps : cfg.fgsm_eps)
          rows.push_back({m.name, label, eps,
                          score_auc(f, fgsm(f, test.features, test.labels, eps, cfg.clip), test.labels)});
        break;
      case AttackKind::deepfool:
        for (std::size_t it : cfg.deepfool_iters) {
          Tensor adv = deepfool(f, test.features, test.labels, it, cfg.deepfool_overshoot);
          if (cfg.clip) adv = clip_to(adv, *cfg.clip);
          rows.push_back({m.name, label, static_cast<double>(it), score_auc(f, adv, test.labels)});
        }
        break;
      case AttackKind::deepfool_best: {
        // Per sample, the grid output with the lowest true-class probability.
        const std::size_t n = test.size(), d = test.dim();
        std::vector<double> best(test.features.values().begin(), test.features.values().end());
        std::vector<double> best_p(n);
        {
          const Tensor p = f.predict_proba(test.features);
          for (std::size_t i = 0; i < n; ++i) best_p[i] = p.at(i, static_cast<std::size_t>(test.labels[i]));
        }
        for (std::size_t it : cfg.deepfool_iters) {
          Tensor adv = deepfool(f, test.features, test.labels, it, cfg.deepfool_overshoot);
          if (cfg.clip) adv = clip_to(adv, *cfg.clip);
          const Tensor p = f.predict_proba(adv);
          for (std::size_t i = 0; i < n; ++i) {
            const double pt = p.at(i, static_cast<std::size_t>(test.labels[i]));
            if (pt < best_p[i]) {
              best_p[i] = pt;
              std::copy_n(adv.values().begin() + static_cast<long>(i * d), d,
                          best.begin() + static_cast<long>(i * d));
            }
          }
        }
        const double top = cfg.deepfool_iters.empty()
                               ? 0.0
                               : static_cast<double>(*std::max_element(cfg.deepfool_iters.begin(),
                                                                       cfg.deepfool_iters.end()));
        rows.push_back({m.name, label, top,
                        score_auc(f, Tensor(test.features.shape(), std::move(best)), test.labels)});
        break;
      }
      case AttackKind::cw: {
        CwConfig cc = cfg.cw;
        cc.kappa = cw_kappa;
        // best-so-far iterates are prefixes of the longest run
        std::vector<std::size_t> marks = cfg.cw_iters;
        std::sort(marks.begin(), marks.end());
        marks.erase(std::unique(marks.begin(), marks.end()), marks.end());
        std::vector<Tensor> snaps;
        const std::size_t longest = marks.empty() ? 0 : marks.back();
        carlini_wagner(logit_model(f), test.features, test.labels, cc, longest, cw_box, marks, &snaps);
        for (std::size_t it : cfg.cw_iters) {
          const auto pos = static_cast<std::size_t>(std::lower_bound(marks.begin(), marks.end(), it) - marks.begin());
          rows.push_back({m.name, label, static_cast<double>(it), score_auc(f, snaps[pos], test.labels)});
        }
        break;
      }
    }
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "model,attack,magnitude,auc\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.model << ',' << r.attack << ',' << r.magnitude << ',' << r.auc << '\n';
}

}  // namespace acelab
