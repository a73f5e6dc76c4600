#pragma once

// Progressive counterfactual explainer: a conditional encoder-decoder
// generator G(x, c) = g(e(x), c) trained adversarially against a
// discriminator that also sees the frozen classifier's penultimate features.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "acelab/classifier.hpp"
#include "acelab/data.hpp"
#include "acelab/nn.hpp"

namespace acelab {

struct PCEConfig {
  double lambda_adv = 10.0;
  double lambda_f = 10.0;
  double lambda_rec = 100.0;
  double path_length_decay = 0.99;
  std::size_t epochs = 200;
  double subset_fraction = 0.5;
  std::size_t batch_size = 64;
  std::size_t latent_dim = 64;
  bool fusion = true;
  AdamConfig adam{2e-4, 0.5, 0.999, 1e-8};

  void validate() const {
    if (lambda_adv < 0.0 || lambda_f < 0.0 || lambda_rec < 0.0) {
      throw ContractError("PCE loss weights must be non-negative");
    }
    if (path_length_decay < 0.0 || path_length_decay > 1.0) {
      throw ContractError("path-length decay outside [0,1]");
    }
    if (subset_fraction <= 0.0 || subset_fraction > 1.0) {
      throw ContractError("PCE subset fraction outside (0,1]");
    }
    if (batch_size == 0 || latent_dim == 0) throw ContractError("PCE sizes must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Conditions

/// Traversal bands for c[k], from the original class to the counterfactual one.
enum class Band {
  original,        // [0.8, 1.0]
  approaching,     // [0.5, 0.8)
  crossing,        // [0.2, 0.5)
  counterfactual,  // [0.0, 0.2)
};

struct Interval {
  double lo, hi;
};

inline Interval band_interval(Band b) {
  switch (b) {
    case Band::original: return {0.8, 1.0};
    case Band::approaching: return {0.5, 0.8};
    case Band::crossing: return {0.2, 0.5};
    case Band::counterfactual: return {0.0, 0.2};
  }
  return {0.0, 1.0};
}

inline Band band_of(double ck) {
  if (ck >= 0.8) return Band::original;
  if (ck >= 0.5) return Band::approaching;
  if (ck >= 0.2) return Band::crossing;
  return Band::counterfactual;
}

inline const char* band_name(Band b) {
  switch (b) {
    case Band::original: return "original";
    case Band::approaching: return "approaching";
    case Band::crossing: return "crossing";
    case Band::counterfactual: return "counterfactual";
  }
  return "?";
}

/// Desired classifier outcome: a probability vector supported on {k, k_c}.
struct Condition {
  std::vector<double> c;

  void validate() const {
    double s = 0.0;
    for (double v : c) {
      if (v < 0.0 || v > 1.0) throw ContractError("condition entry outside [0,1]");
      s += v;
    }
    if (std::fabs(s - 1.0) > 1e-9) throw ContractError("condition does not sum to 1");
  }
};

/// Zero vector with c[k] = u and c[k_c] = 1 - u.
inline Condition make_condition(std::size_t num_classes, std::size_t k, std::size_t k_c, double u) {
  if (k == k_c) throw ContractError("condition: original and counterfactual class coincide");
  if (k >= num_classes || k_c >= num_classes) throw ContractError("condition: class out of range");
  if (u < 0.0 || u > 1.0) throw ContractError("condition: u outside [0,1]");
  Condition out{std::vector<double>(num_classes, 0.0)};
  out.c[k] = u;
  out.c[k_c] = 1.0 - u;
  return out;
}

/// Draws c[k] uniformly from [0,1), or from `band` when given.
inline Condition sample_condition(std::size_t num_classes, std::size_t k, std::size_t k_c, Rng& rng,
                                  std::optional<Band> band = std::nullopt) {
  if (k == k_c) throw ContractError("sample_condition: k == k_c");
  const Interval iv = band ? band_interval(*band) : Interval{0.0, 1.0};
  return make_condition(num_classes, k, k_c, rng.uniform(iv.lo, iv.hi));
}

inline Tensor stack_conditions(const std::vector<Condition>& cs) {
  if (cs.empty()) throw ContractError("no conditions");
  const std::size_t k = cs.front().c.size();
  std::vector<double> v;
  v.reserve(cs.size() * k);
  for (const auto& c : cs) {
    if (c.c.size() != k) throw ShapeError("conditions of different lengths");
    v.insert(v.end(), c.c.begin(), c.c.end());
  }
  return Tensor(Shape{cs.size(), k}, std::move(v));
}

// ---------------------------------------------------------------------------
// Networks

/// e: x -> w. Dense(d, h) ReLU Dense(h, h); the latent code is linear.
class Encoder {
 public:
  Encoder() = default;
  Encoder(std::size_t input_dim, std::size_t latent_dim, Rng& rng)
      : l1_(input_dim, latent_dim, Init::he_uniform, rng),
        l2_(latent_dim, latent_dim, Init::xavier_uniform, rng) {}

  Tensor forward(const Tensor& x) const { return l2_.forward(relu(l1_.forward(x))); }

  void collect(const std::string& p, ParameterList& out) const {
    l1_.collect(p + ".fc1", out);
    l2_.collect(p + ".fc2", out);
  }
  Encoder clone() const {
    Encoder e;
    e.l1_ = l1_.clone();
    e.l2_ = l2_.clone();
    return e;
  }
  std::size_t latent_dim() const { return l2_.out_features(); }

 private:
  Dense l1_, l2_;
};

/// g: (w, c) -> x. The condition is embedded by a dense layer, concatenated with
/// w and mapped back to input space by Dense(2h, h) ReLU Dense(h, d).
class ConditionalDecoder {
 public:
  ConditionalDecoder() = default;
  ConditionalDecoder(std::size_t num_classes, std::size_t latent_dim, std::size_t output_dim,
                     Rng& rng)
      : embed_(num_classes, latent_dim, Init::xavier_uniform, rng),
        body1_(2 * latent_dim, latent_dim, Init::he_uniform, rng),
        body2_(latent_dim, output_dim, Init::xavier_uniform, rng) {}

  Tensor forward(const Tensor& w, const Tensor& c) const {
    if (c.cols() != embed_.in_features()) {
      throw ContractError("decoder: condition has " + std::to_string(c.cols()) +
                          " classes, expected " + std::to_string(embed_.in_features()));
    }
    const Tensor z = concat_cols({w, embed_.forward(c)});
    return body2_.forward(relu(body1_.forward(z)));
  }

  void collect(const std::string& p, ParameterList& out) const {
    embed_.collect(p + ".embed", out);
    body1_.collect(p + ".fc1", out);
    body2_.collect(p + ".fc2", out);
  }
  ConditionalDecoder clone() const {
    ConditionalDecoder d;
    d.embed_ = embed_.clone();
    d.body1_ = body1_.clone();
    d.body2_ = body2_.clone();
    return d;
  }

 private:
  Dense embed_, body1_, body2_;
};

/// D: trunk Dense(d,h) ReLU Dense(h,h) ReLU, then a single-logit head over the
/// trunk features, optionally concatenated with classifier penultimate features.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(std::size_t input_dim, std::size_t hidden, std::size_t classifier_features,
                bool fusion, Rng& rng)
      : t1_(input_dim, hidden, Init::he_uniform, rng),
        t2_(hidden, hidden, Init::he_uniform, rng),
        head_(fusion ? hidden + classifier_features : hidden, 1, Init::xavier_uniform, rng),
        fusion_(fusion) {}

  /// Pre-sigmoid score; `classifier_features` is ignored without fusion.
  Tensor logits(const Tensor& x, const Tensor& classifier_features) const {
    const Tensor h = relu(t2_.forward(relu(t1_.forward(x))));
    return head_.forward(fusion_ ? concat_cols({h, classifier_features}) : h);
  }

  bool fusion() const { return fusion_; }

  void collect(const std::string& p, ParameterList& out) const {
    t1_.collect(p + ".fc1", out);
    t2_.collect(p + ".fc2", out);
    head_.collect(p + ".head", out);
  }
  Discriminator clone() const {
    Discriminator d;
    d.t1_ = t1_.clone();
    d.t2_ = t2_.clone();
    d.head_ = head_.clone();
    d.fusion_ = fusion_;
    return d;
  }

 private:
  Dense t1_, t2_, head_;
  bool fusion_ = true;
};

class PCE {
 public:
  PCE() = default;

  /// Builds an untrained explainer around a frozen copy of `f`.
  PCE(const Classifier& f, const PCEConfig& cfg, Rng& rng)
      : classifier_(f.clone()),
        encoder_(f.input_dim(), cfg.latent_dim, rng),
        decoder_(f.num_classes(), cfg.latent_dim, f.input_dim(), rng),
        discriminator_(f.input_dim(), cfg.latent_dim, f.hidden(), cfg.fusion, rng),
        path_length_mean_(Tensor::zeros(Shape{1})) {
    classifier_.set_frozen(true);
  }

  Tensor encode(const Tensor& x) const { return encoder_.forward(x); }
  Tensor decode(const Tensor& w, const Tensor& c) const { return decoder_.forward(w, c); }

  /// x_hat = g(e(x), c), one condition row per sample.
  Tensor generate(const Tensor& x, const Tensor& c) const {
    if (c.rank() != 2 || c.rows() != x.rows()) {
      throw ShapeError("generate: need one condition row per sample");
    }
    if (c.cols() != classifier_.num_classes()) {
      throw ContractError("generate: condition has " + std::to_string(c.cols()) +
                          " classes but the classifier has " +
                          std::to_string(classifier_.num_classes()));
    }
    return decode(encode(x), c);
  }

  Tensor discriminator_logits(const Tensor& x) const {
    return discriminator_.logits(x, classifier_.forward(x).penultimate);
  }

  /// D(x) in (0, 1), as [n x 1].
  Tensor discriminate(const Tensor& x) const { return sigmoid(discriminator_logits(x)); }

  /// In-distribution density score D(x) per sample.
  std::vector<double> density(const Tensor& x) const {
    NoGradGuard no_grad;
    const Tensor d = discriminate(x);
    return {d.values().begin(), d.values().end()};
  }

  const Classifier& classifier() const { return classifier_; }
  double path_length_mean() const { return path_length_mean_[0]; }
  void set_path_length_mean(double a) { path_length_mean_.mutable_values()[0] = a; }

  ParameterList generator_state() const {
    ParameterList out;
    encoder_.collect("encoder", out);
    decoder_.collect("decoder", out);
    return out;
  }
  ParameterList discriminator_state() const {
    ParameterList out;
    discriminator_.collect("discriminator", out);
    return out;
  }

  /// Everything needed to restore the explainer, in persistence order.
  ParameterList state() const {
    ParameterList out = generator_state();
    for (auto& p : discriminator_state()) out.push_back(std::move(p));
    for (auto& p : classifier_.state()) out.push_back({"classifier." + p.name, p.tensor, false});
    out.push_back({"path_length.a", path_length_mean_, false});
    return out;
  }

  PCE clone() const {
    PCE p;
    p.classifier_ = classifier_.clone();
    p.classifier_.set_frozen(true);
    p.encoder_ = encoder_.clone();
    p.decoder_ = decoder_.clone();
    p.discriminator_ = discriminator_.clone();
    p.path_length_mean_ = path_length_mean_.clone();
    return p;
  }

 private:
  Classifier classifier_;
  Encoder encoder_;
  ConditionalDecoder decoder_;
  Discriminator discriminator_;
  Tensor path_length_mean_;
};

// ---------------------------------------------------------------------------
// Loss components

/// Discriminator side of the logistic adversarial loss:
/// -mean[log D(x) + log(1 - D(G(x,c)))].
inline Tensor discriminator_loss(const Tensor& d_real, const Tensor& d_fake) {
  return -(mean(safe_log(d_real)) + mean(safe_log(1.0 - d_fake)));
}

/// Non-saturating generator side: -mean[log D(G(x,c))].
inline Tensor generator_adversarial_loss(const Tensor& d_fake) { return -mean(safe_log(d_fake)); }

struct AdversarialLosses {
  Tensor discriminator;  // gradient reaches D only
  Tensor generator;      // gradient reaches G (and D's parameters, which the G step ignores)
};

inline AdversarialLosses adv_losses(const PCE& pce, const Tensor& x_real, const Tensor& c) {
  const Tensor fake = pce.generate(x_real, c);
  const Tensor d_real = pce.discriminate(x_real);
  return {discriminator_loss(d_real, pce.discriminate(fake.detach())),
          generator_adversarial_loss(pce.discriminate(fake))};
}

struct PathLength {
  Tensor penalty;          // mean over samples of (||J^T y|| - a)^2
  double mean_norm = 0.0;  // mean of ||J^T y||, feeds the running constant a
};

/// Path-length penalty of `output` (computed from `latent`) along `probe`.
/// The vector-Jacobian products keep their graph so the penalty is trainable.
inline PathLength path_length_penalty(const Tensor& output, const Tensor& latent,
                                      const Tensor& probe, double a) {
  const Tensor jt_y = vjp(output, latent, probe, /*create_graph=*/true);
  const Tensor norms = row_norm(jt_y);
  double m = 0.0;
  for (double v : norms.values()) m += v;
  m /= static_cast<double>(norms.size());
  return {mean(square(norms - a)), m};
}

/// Running-constant update a <- a + (1 - decay) (mean_norm - a).
inline double update_path_length_mean(double a, double mean_norm, double decay) {
  return a + (1.0 - decay) * (mean_norm - a);
}

/// Mean over the batch of KL(f(x_hat) || c) with guarded logs.
inline Tensor classifier_consistency(const Tensor& probs_hat, const Tensor& c) {
  if (probs_hat.shape() != c.shape()) throw ShapeError("classifier_consistency: shape mismatch");
  return sum(probs_hat * (safe_log(probs_hat) - safe_log(c))) *
         (1.0 / static_cast<double>(probs_hat.rows()));
}

/// L1 distance between x and its reconstruction plus L1 distance between their
/// latent codes, each averaged over batch and coordinates.
inline Tensor reconstruction_term(const Tensor& x, const Tensor& x_bar, const Tensor& code,
                                  const Tensor& code_bar) {
  return mean(abs(x - x_bar)) + mean(abs(code - code_bar));
}

/// Self plus cyclic reconstruction: x_self = G(x, f(x)), x_cyc = G(G(x, c), f(x)).
inline Tensor reconstruction_loss(const PCE& pce, const Tensor& x, const Tensor& c) {
  const Tensor f_x = softmax(pce.classifier().logits(x)).detach();
  const Tensor w = pce.encode(x);
  const Tensor x_self = pce.decode(w, f_x);
  const Tensor x_hat = pce.decode(w, c);
  const Tensor x_cyc = pce.generate(x_hat, f_x);
  return reconstruction_term(x, x_self, w, pce.encode(x_self)) +
         reconstruction_term(x, x_cyc, w, pce.encode(x_cyc));
}

/// The four generator-side terms and their weighted total.
struct GeneratorObjective {
  Tensor adversarial;
  Tensor path_length;
  Tensor consistency;
  Tensor reconstruction;
  Tensor total;
  double mean_path_norm = 0.0;
};

/// lambda_adv (L_adv + L_reg) + lambda_f L_f + lambda_rec L_rec for one batch,
/// sharing e(x) and G(x, c) between the terms.
inline GeneratorObjective generator_objective(const PCE& pce, const Tensor& x, const Tensor& c,
                                              const Tensor& probe, double a,
                                              const PCEConfig& cfg) {
  const Classifier& f = pce.classifier();
  const Tensor f_x = softmax(f.logits(x)).detach();
  const Tensor w = pce.encode(x);
  const Tensor x_hat = pce.decode(w, c);

  GeneratorObjective g;
  g.adversarial = generator_adversarial_loss(pce.discriminate(x_hat));
  const PathLength pl = path_length_penalty(x_hat, w, probe, a);
  g.path_length = pl.penalty;
  g.mean_path_norm = pl.mean_norm;
  g.consistency = classifier_consistency(softmax(f.logits(x_hat)), c);
  const Tensor x_self = pce.decode(w, f_x);
  const Tensor x_cyc = pce.generate(x_hat, f_x);
  g.reconstruction = reconstruction_term(x, x_self, w, pce.encode(x_self)) +
                     reconstruction_term(x, x_cyc, w, pce.encode(x_cyc));
  g.total = (g.adversarial + g.path_length) * cfg.lambda_adv + g.consistency * cfg.lambda_f +
            g.reconstruction * cfg.lambda_rec;
  return g;
}

// ---------------------------------------------------------------------------
// Training

struct CurveRow {
  std::size_t step = 0;
  std::size_t epoch = 0;  // 1-based
  double loss_d = 0.0;
  double loss_g_adv = 0.0;
  double l_reg = 0.0;
  double l_f = 0.0;
  double l_rec = 0.0;
  double a = 0.0;
};

struct TrainingCurve {
  std::vector<CurveRow> rows;

  /// Mean of a column over the rows of one epoch.
  double epoch_mean(std::size_t epoch, double CurveRow::*field) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.epoch == epoch) {
        s += r.*field;
        ++n;
      }
    if (n == 0) throw ContractError("no curve rows for epoch " + std::to_string(epoch));
    return s / static_cast<double>(n);
  }
  std::size_t epochs() const { return rows.empty() ? 0 : rows.back().epoch; }
};

/// For each row of x: predicted class k, a counterfactual class k_c (the other
/// class when K = 2, otherwise drawn uniformly among the rest) and u ~ U(0,1).
inline Tensor sample_training_conditions(const Classifier& f, const Tensor& x, Rng& rng) {
  const std::size_t k_classes = f.num_classes();
  const auto pred = f.predict(x);
  std::vector<Condition> cs;
  cs.reserve(pred.size());
  for (std::size_t k : pred) {
    std::size_t k_c = k == 0 ? 1 : 0;
    if (k_classes > 2) {
      k_c = rng.below(k_classes - 1);
      if (k_c >= k) ++k_c;
    }
    cs.push_back(sample_condition(k_classes, k, k_c, rng));
  }
  return stack_conditions(cs);
}

struct TrainedPCE {
  PCE pce;
  TrainingCurve curve;
};

namespace detail {
inline void check_finite(double v, const char* name, std::size_t step) {
  if (!std::isfinite(v)) {
    throw TrainingDiverged("PCE training diverged at step " + std::to_string(step) + " in " +
                           name + " (value " + std::to_string(v) + ")");
  }
}
}  // namespace detail

/// Alternating optimization over a random subset of `data`: one discriminator
/// step on lambda_adv * loss_D, then one encoder/decoder step on the full
/// generator objective. The classifier stays frozen throughout.
inline TrainedPCE train_pce(const Classifier& f, const LabeledSet& data, const PCEConfig& cfg,
                            Rng& rng) {
  cfg.validate();
  Rng init_rng = rng.child("pce-init");
  Rng run_rng = rng.child("pce-train");
  PCE pce(f, cfg, init_rng);

  const auto subset_size = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.subset_fraction * static_cast<double>(data.size()))));
  auto idx = permutation(run_rng, data.size());
  idx.resize(subset_size);
  const LabeledSet subset = data.subset(idx);
  const std::size_t d = subset.dim();

  const ParameterList g_state = pce.generator_state();
  const ParameterList d_state = pce.discriminator_state();
  Adam g_opt(trainable(g_state), cfg.adam);
  Adam d_opt(trainable(d_state), cfg.adam);

  TrainingCurve curve;
  double a = pce.path_length_mean();
  std::size_t step = 0;
  const auto fv = subset.features.values();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = permutation(run_rng, subset_size);
    for (std::size_t start = 0; start < subset_size; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, subset_size - start);
      std::vector<double> xb(b * d);
      for (std::size_t i = 0; i < b; ++i)
        std::copy_n(fv.begin() + static_cast<long>(order[start + i] * d), d,
                    xb.begin() + static_cast<long>(i * d));
      const Tensor x(Shape{b, d}, std::move(xb));
      const Tensor c = sample_training_conditions(pce.classifier(), x, run_rng);
      ++step;
      CurveRow row;
      row.step = step;
      row.epoch = epoch;

      // Discriminator step.
      d_opt.zero_grad();
      Tensor fake;
      {
        NoGradGuard no_grad;
        fake = pce.generate(x, c);
      }
      const Tensor loss_d = discriminator_loss(pce.discriminate(x), pce.discriminate(fake));
      row.loss_d = loss_d.item();
      detail::check_finite(row.loss_d, "loss-D", step);
      backward(loss_d * cfg.lambda_adv);
      d_opt.step();

      // Generator step.
      g_opt.zero_grad();
      const Tensor probe(Shape{b, d}, gaussian(run_rng, b * d));
      const GeneratorObjective obj = generator_objective(pce, x, c, probe, a, cfg);
      row.loss_g_adv = obj.adversarial.item();
      row.l_reg = obj.path_length.item();
      row.l_f = obj.consistency.item();
      row.l_rec = obj.reconstruction.item();
      detail::check_finite(row.loss_g_adv, "loss-G-adv", step);
      detail::check_finite(row.l_reg, "L_reg", step);
      detail::check_finite(row.l_f, "L_f", step);
      detail::check_finite(row.l_rec, "L_rec", step);
      backward(obj.total);
      g_opt.step();
      d_opt.zero_grad();  // G's backward also reached D's parameters

      a = update_path_length_mean(a, obj.mean_path_norm, cfg.path_length_decay);
      row.a = a;
      curve.rows.push_back(row);
    }
  }
  pce.set_path_length_mean(a);
  return {std::move(pce), std::move(curve)};
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Mean over samples of ||G(x, f(x)) - x||_1.
inline double self_reconstruction_l1(const PCE& pce, const Tensor& x) {
  NoGradGuard no_grad;
  const Tensor f_x = softmax(pce.classifier().logits(x));
  const Tensor r = pce.generate(x, f_x);
  const std::size_t n = x.rows(), d = x.cols();
  double s = 0.0;
  for (std::size_t i = 0; i < n * d; ++i) s += std::fabs(r[i] - x[i]);
  return s / static_cast<double>(n);
}

/// Mean KL(f(G(x, c)) || c) over freshly sampled training conditions.
inline double consistency_kl(const PCE& pce, const Tensor& x, Rng& rng) {
  NoGradGuard no_grad;
  const Tensor c = sample_training_conditions(pce.classifier(), x, rng);
  return classifier_consistency(softmax(pce.classifier().logits(pce.generate(x, c))), c).item();
}

/// Accuracy of D (threshold 0.5) at telling real samples from G(x, c) with
/// training-distribution conditions.
inline double discriminator_accuracy(const PCE& pce, const Tensor& x, Rng& rng) {
  NoGradGuard no_grad;
  const Tensor c = sample_training_conditions(pce.classifier(), x, rng);
  const auto real = pce.density(x);
  const auto fake = pce.density(pce.generate(x, c));
  std::size_t hit = 0;
  for (double v : real) hit += v >= 0.5;
  for (double v : fake) hit += v < 0.5;
  return static_cast<double>(hit) / static_cast<double>(real.size() + fake.size());
}

}  // namespace acelab
