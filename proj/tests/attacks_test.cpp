#include <gtest/gtest.h>

#include <cmath>

#include "acelab/attacks.hpp"
#include "oracles.hpp"

using namespace acelab;

namespace {

// z = x W + b with fixed weights; every attack has a closed form here.
LogitModel affine(std::vector<double> w, std::vector<double> b) {
  const std::size_t k = b.size();
  const std::size_t d = w.size() / k;
  const Tensor W(Shape{d, k}, std::move(w));
  const Tensor B(Shape{1, k}, std::move(b));
  return {[W, B](const Tensor& x) { return matmul(x, W) + B; }, k};
}

const LabeledSet& moons_split() {
  static const LabeledSet test = [] {
    Rng rng(21);
    auto all = two_moons(400, 0.1, rng);
    standardize({&all});
    return all;
  }();
  return test;
}

const Classifier& moons_model() {
  static const Classifier f = [] {
    Rng rng(4);
    ClassifierConfig cfg;
    cfg.epochs = 30;
    return train_classifier(moons_split(), nullptr, cfg, rng).model;
  }();
  return f;
}

}  // namespace

TEST(DeepFool, AffineBinaryClosedForm) {
  // w = grad(z1 - z0) = (1, -2); one step lands on the boundary, the overshoot crosses it
  const auto f = affine({0.0, 1.0, 0.0, -2.0}, {0.0, 0.5});
  const Tensor x = Tensor::from_rows({{-1.0, 1.0}, {-3.0, 0.5}});
  const std::vector<int> y{0, 0};
  const auto r = deepfool_detailed(f, x, y, 10, 0.02);
  for (std::size_t i = 0; i < 2; ++i) {
    const double x0 = x.at(i, 0), x1 = x.at(i, 1);
    const double diff = x0 - 2.0 * x1 + 0.5;  // z1 - z0
    ASSERT_LT(diff, 0.0);
    const double scale = -diff / 5.0;
    EXPECT_NEAR(r.perturbation.at(i, 0), scale * 1.0, 1e-8);
    EXPECT_NEAR(r.perturbation.at(i, 1), scale * -2.0, 1e-8);
    EXPECT_NEAR(r.x_adv.at(i, 0), x0 + 1.02 * scale, 1e-8);
    EXPECT_EQ(r.iterations[i], 1u);
  }
  const auto pred = f.predict(r.x_adv);
  EXPECT_EQ(pred, (std::vector<std::size_t>{1, 1}));
}

TEST(DeepFool, MulticlassPicksClosestBoundary) {
  // three classes; class 2 is nearer for this point
  const auto f = affine({1.0, 0.0, 0.0, 0.0, 1.0, 0.5}, {0.0, -5.0, 0.0});
  const Tensor x = Tensor::from_rows({{1.0, 0.0}});
  const auto r = deepfool_detailed(f, x, {0}, 1, 0.02);
  // z2 - z0 = -x0 + 0.5 x1, gradient (-1, 0.5), value -1 -> distance 1/sqrt(1.25)
  EXPECT_NEAR(r.perturbation.at(0, 0), -1.0 / 1.25, 1e-8);
  EXPECT_NEAR(r.perturbation.at(0, 1), 0.5 / 1.25, 1e-8);
}

TEST(DeepFool, ZeroIterationsAndMisclassifiedRowsUnchanged) {
  const auto f = affine({0.0, 1.0, 0.0, -2.0}, {0.0, 0.5});
  const Tensor x = Tensor::from_rows({{-1.0, 1.0}, {3.0, 0.0}});
  const Tensor none = deepfool(f, x, {0, 0}, 0);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(none[i], x[i]);
  const auto r = deepfool_detailed(f, x, {0, 0}, 5);
  EXPECT_EQ(r.x_adv.at(1, 0), 3.0);  // already predicted as class 1
  EXPECT_EQ(r.iterations[1], 0u);
}

TEST(DeepFool, FlipsMostPredictionsOfTrainedModel) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  const Tensor adv = deepfool(f, d.features, d.labels, 50);
  const auto before = f.predict(d.features);
  const auto after = f.predict(adv);
  std::size_t correct = 0, flipped = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (before[i] != static_cast<std::size_t>(d.labels[i])) continue;
    ++correct;
    flipped += after[i] != before[i];
  }
  EXPECT_GT(static_cast<double>(flipped) / static_cast<double>(correct), 0.9);
}

TEST(DeepFool, NonFiniteGradientIsAttackError) {
  LogitModel bad{[](const Tensor& x) {
                   const Tensor w(Shape{2, 2}, {NAN, 1.0, 0.0, 1.0});
                   return matmul(x, w);
                 },
                 2};
  // the NaN logit compares false everywhere, so the row still counts as class 0
  EXPECT_THROW(deepfool(bad, Tensor::from_rows({{0.0, -1.0}}), {0}, 3), AttackError);
}

TEST(Fgsm, AffineStepIsSignOfWeightGap) {
  const auto f = affine({2.0, -1.0, 0.5, 3.0}, {0.0, 0.0});
  const Tensor x = Tensor::from_rows({{0.3, -0.2}, {1.0, 1.0}});
  const Tensor adv = fgsm(f, x, {0, 1}, 0.1);
  // label 0 pushes along sign(W[:,1] - W[:,0]) = (-, +); label 1 the opposite
  EXPECT_NEAR(adv.at(0, 0), 0.2, 1e-12);
  EXPECT_NEAR(adv.at(0, 1), -0.1, 1e-12);
  EXPECT_NEAR(adv.at(1, 0), 1.1, 1e-12);
  EXPECT_NEAR(adv.at(1, 1), 0.9, 1e-12);
}

TEST(Fgsm, ZeroEpsIsIdentityAndClipHolds) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  const Tensor same = fgsm(f, d.features, d.labels, 0.0);
  for (std::size_t i = 0; i < same.size(); ++i) EXPECT_EQ(same[i], d.features[i]);
  const Box box{{-0.5, -0.5}, {0.5, 0.5}};
  const Tensor adv = fgsm(f, d.features, d.labels, 0.3, box);
  for (double v : adv.values()) {
    EXPECT_GE(v, -0.5);
    EXPECT_LE(v, 0.5);
  }
  const Tensor free = fgsm(f, d.features, d.labels, 0.3);
  for (std::size_t i = 0; i < free.size(); ++i) EXPECT_LE(std::fabs(free[i] - d.features[i]), 0.3 + 1e-12);
  EXPECT_THROW(fgsm(f, d.features, d.labels, -0.1), ContractError);
}

TEST(CarliniWagner, ZeroIterationsReturnsInput) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  const auto r = carlini_wagner(f, d.features, d.labels, CwConfig{}, 0, data_box(d.features));
  for (std::size_t i = 0; i < d.features.size(); ++i) EXPECT_EQ(r.x_adv[i], d.features[i]);
  EXPECT_TRUE(r.loss_history.empty());
}

TEST(CarliniWagner, BestLossNeverIncreasesAndStaysInBox) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  const Box box = data_box(d.features);
  CwConfig cfg;
  cfg.lr = 0.05;
  const auto r = carlini_wagner(f, d.features, d.labels, cfg, 40, box);
  ASSERT_EQ(r.loss_history.size(), 40u);
  for (std::size_t i = 1; i < r.loss_history.size(); ++i) EXPECT_LE(r.loss_history[i], r.loss_history[i - 1]);
  for (std::size_t i = 0; i < r.x_adv.rows(); ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_GE(r.x_adv.at(i, j), box.lo[j]);
      EXPECT_LE(r.x_adv.at(i, j), box.hi[j]);
    }
}

TEST(CarliniWagner, ObjectiveMatchesHandComputation) {
  const auto f = affine({1.0, -1.0, 0.0, 0.0}, {0.0, 0.0});
  const Tensor x = Tensor::from_rows({{2.0, 0.0}});
  const Tensor xa = Tensor::from_rows({{1.0, 1.0}});
  CwConfig cfg;
  cfg.c = 2.0;
  cfg.kappa = 5.0;
  // distance 2, margin z0 - z1 = 2 -> 2 + 2*2
  EXPECT_NEAR(cw_objective(f, xa, x, {0}, cfg)[0], 6.0, 1e-12);
  // the margin floor: a large negative margin is clipped at -kappa
  const Tensor far = Tensor::from_rows({{-10.0, 0.0}});
  EXPECT_NEAR(cw_objective(f, far, x, {0}, cfg)[0], 144.0 - 10.0, 1e-12);
}

TEST(CarliniWagner, AttackReducesTrueClassMargin) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  CwConfig cfg;
  cfg.c = 10.0;
  cfg.lr = 0.05;
  const auto r = carlini_wagner(f, d.features, d.labels, cfg, 100, data_box(d.features));
  EXPECT_LT(score_auc(f, r.x_adv, d.labels), score_auc(f, d.features, d.labels));
}

TEST(Sweep, ZeroMagnitudeMatchesCleanAuc) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  AttackConfig cfg;
  cfg.fgsm_eps = {0.0, 0.3};
  cfg.deepfool_iters = {0, 2};
  cfg.cw_iters = {0, 10};
  const double clean = score_auc(f, d.features, d.labels);
  const std::vector<NamedModel> models{{"base", &f}};
  const Box box = data_box(d.features);
  for (AttackKind k : {AttackKind::fgsm, AttackKind::deepfool, AttackKind::cw}) {
    const auto rows = robustness_sweep(models, k, cfg, d, box);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].magnitude, 0.0);
    EXPECT_NEAR(rows[0].auc, clean, 1e-12) << attack_name(k);
    EXPECT_LE(rows[1].auc, clean + 1e-12) << attack_name(k);
  }
  const auto best = robustness_sweep(models, AttackKind::deepfool_best, cfg, d, box);
  ASSERT_EQ(best.size(), 1u);
  EXPECT_LE(best[0].auc, clean);
}

TEST(DataBox, WidensRangeByStd) {
  const Tensor x = Tensor::from_rows({{0.0, 1.0}, {2.0, 1.0}});
  const Box b = data_box(x, 3.0);
  EXPECT_NEAR(b.lo[0], -3.0, 1e-12);
  EXPECT_NEAR(b.hi[0], 5.0, 1e-12);
  EXPECT_NEAR(b.lo[1], 1.0, 1e-12);
}

TEST(CarliniWagner, ZeroTradeOffKeepsInput) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  CwConfig cfg;
  cfg.c = 0.0;
  const auto r = carlini_wagner(f, d.features, d.labels, cfg, 20, data_box(d.features));
  for (std::size_t i = 0; i < d.features.size(); ++i) EXPECT_EQ(r.x_adv[i], d.features[i]);
}

TEST(CarliniWagner, MisclassifiedBeyondKappaStaysPut) {
  const auto f = affine({1.0, -1.0, 0.0, 0.0}, {0.0, 0.0});
  // label 0 but z0 - z1 = -6 < -kappa: loss at the start is already -c*kappa
  const Tensor x = Tensor::from_rows({{-3.0, 0.0}});
  const auto r = carlini_wagner(f, x, {0}, CwConfig{1.0, 0.01, 5.0}, 30, Box{{-10.0, -10.0}, {10.0, 10.0}});
  EXPECT_EQ(r.x_adv[0], -3.0);
  EXPECT_EQ(r.x_adv[1], 0.0);
  EXPECT_DOUBLE_EQ(r.best_loss[0], -5.0);
}

TEST(Fgsm, InfinityNormIsExactlyEps) {
  const auto f = affine({2.0, -1.0, 0.5, 3.0}, {0.0, 0.0});
  Rng rng(2);
  const Tensor x(Shape{50, 2}, gaussian(rng, 100));
  std::vector<int> y(50);
  for (std::size_t i = 0; i < 50; ++i) y[i] = static_cast<int>(i % 2);
  const Tensor adv = fgsm(f, x, y, 0.17);
  for (std::size_t i = 0; i < 50; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < 2; ++j) m = std::max(m, std::fabs(adv.at(i, j) - x.at(i, j)));
    EXPECT_NEAR(m, 0.17, 1e-12);
  }
}

TEST(Attacks, RepeatCallsAreIdentical) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  const Box box = data_box(d.features);
  const Tensor a1 = deepfool(f, d.features, d.labels, 5), a2 = deepfool(f, d.features, d.labels, 5);
  const auto c1 = carlini_wagner(f, d.features, d.labels, CwConfig{}, 10, box);
  const auto c2 = carlini_wagner(f, d.features, d.labels, CwConfig{}, 10, box);
  for (std::size_t i = 0; i < a1.size(); ++i) {
    EXPECT_EQ(a1[i], a2[i]);
    EXPECT_EQ(c1.x_adv[i], c2.x_adv[i]);
  }
}

TEST(CarliniWagner, SnapshotsMatchSeparateRuns) {
  const auto& d = moons_split();
  const auto& f = moons_model();
  const Box box = data_box(d.features);
  std::vector<Tensor> snaps;
  carlini_wagner(logit_model(f), d.features, d.labels, CwConfig{}, 20, box, {0, 7, 20}, &snaps);
  ASSERT_EQ(snaps.size(), 3u);
  const std::size_t iters[] = {0, 7, 20};
  for (std::size_t s = 0; s < 3; ++s) {
    const auto r = carlini_wagner(f, d.features, d.labels, CwConfig{}, iters[s], box);
    for (std::size_t i = 0; i < r.x_adv.size(); ++i) ASSERT_EQ(snaps[s][i], r.x_adv[i]);
  }
}
