#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "acelab/data.hpp"

using namespace acelab;

namespace {

std::uint64_t checksum(const LabeledSet& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : s.features.values()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = (h ^ bits) * 1099511628211ULL;
  }
  for (int l : s.labels) h = (h ^ static_cast<std::uint64_t>(l + 7)) * 1099511628211ULL;
  return h;
}

}  // namespace

TEST(TwoMoons, FourPointsClosedForm) {
  Rng rng(0);
  const LabeledSet s = two_moons(4, 0.0, rng);
  ASSERT_EQ(s.size(), 4u);
  const double expected[4][2] = {{1, 0}, {-1, 0}, {0, 0.5}, {2, 0.5}};
  const int labels[4] = {0, 0, 1, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(s.features.at(i, 0), expected[i][0], 1e-12);
    EXPECT_NEAR(s.features.at(i, 1), expected[i][1], 1e-12);
    EXPECT_EQ(s.labels[i], labels[i]);
  }
}

TEST(TwoMoons, NoiselessPointsLieOnTheirCurves) {
  Rng rng(0);
  const LabeledSet s = two_moons(200, 0.0, rng);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double x = s.features.at(i, 0), y = s.features.at(i, 1);
    if (s.labels[i] == 0) {
      EXPECT_NEAR(x * x + y * y, 1.0, 1e-12);
      EXPECT_GE(y, -1e-12);
    } else {
      EXPECT_NEAR((1 - x) * (1 - x) + (0.5 - y) * (0.5 - y), 1.0, 1e-12);
      EXPECT_LE(y, 0.5 + 1e-12);
    }
  }
}

TEST(TwoMoons, OddCountRejected) {
  Rng rng(0);
  EXPECT_THROW(two_moons(3, 0.1, rng), ContractError);
}

TEST(TwoMoons, ReproducibleChecksum) {
  Rng a(123), b(123), c(124);
  const auto sa = two_moons(2000, 0.1, a);
  EXPECT_EQ(checksum(sa), checksum(two_moons(2000, 0.1, b)));
  EXPECT_NE(checksum(sa), checksum(two_moons(2000, 0.1, c)));
  EXPECT_EQ(sa.label_indices().size(), 2000u);
}

TEST(TwoMoons, NoiseHasRequestedSpread) {
  Rng noisy(5), clean(5);
  const auto a = two_moons(20000, 0.1, noisy);
  const auto b = two_moons(20000, 0.0, clean);
  double s = 0.0;
  for (std::size_t i = 0; i < a.features.size(); ++i) {
    const double d = a.features[i] - b.features[i];
    s += d * d;
  }
  EXPECT_NEAR(std::sqrt(s / static_cast<double>(a.features.size())), 0.1, 0.003);
}

TEST(Rotation, QuarterTurnAboutCenter) {
  const auto p = rotate_about(1.0, 0.0, 0.5, 0.25, 90.0);
  EXPECT_NEAR(p[0], 0.75, 1e-12);
  EXPECT_NEAR(p[1], 0.75, 1e-12);
}

TEST(NearOod, UnseenLabelAndReproducible) {
  Rng a(8), b(8);
  const auto s = near_ood_moons(100, a);
  for (int l : s.labels) EXPECT_EQ(l, 2);
  const auto t = near_ood_moons(100, b);
  for (std::size_t i = 0; i < s.features.size(); ++i) EXPECT_EQ(s.features[i], t.features[i]);
}

TEST(NearOod, NoiselessMoonIsRotatedOuterMoon) {
  Rng rng(8);
  const auto s = near_ood_moons(50, rng, 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double x = s.features.at(i, 0) - 0.5, y = s.features.at(i, 1) - 0.25;
    // rotate back by -90 degrees, then the point sits on the unit circle
    const double bx = y + 0.5, by = -x + 0.25;
    EXPECT_NEAR(bx * bx + by * by, 1.0, 1e-12);
  }
}

TEST(FarOod, RespectsExclusionRadius) {
  Rng drng(1), rng(2);
  const auto train = two_moons(400, 0.1, drng);
  const auto far = far_ood_uniform(300, Box{{-4, -4}, {4, 4}}, train.features, 0.5, rng);
  ASSERT_EQ(far.size(), 300u);
  for (std::size_t i = 0; i < far.size(); ++i) {
    for (std::size_t j = 0; j < train.size(); ++j) {
      const double dx = far.features.at(i, 0) - train.features.at(j, 0);
      const double dy = far.features.at(i, 1) - train.features.at(j, 1);
      ASSERT_GE(std::sqrt(dx * dx + dy * dy), 0.5);
    }
    EXPECT_EQ(far.labels[i], -1);
  }
}

TEST(FarOod, EmptyExclusionIsPlainUniform) {
  Rng rng(3);
  const auto far = far_ood_uniform(20000, Box{{-4, 0}, {4, 2}}, Tensor(), 0.5, rng);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < far.size(); ++i) {
    mx += far.features.at(i, 0);
    my += far.features.at(i, 1);
  }
  // 3 sigma of the mean of U(-4,4) over 20000 draws is about 0.05
  EXPECT_NEAR(mx / 20000.0, 0.0, 0.05);
  EXPECT_NEAR(my / 20000.0, 1.0, 0.015);
}

TEST(FarOod, ZeroCountIsEmpty) {
  Rng rng(3);
  EXPECT_EQ(far_ood_uniform(0, Box{{-4, -4}, {4, 4}}, Tensor(), 0.5, rng).size(), 0u);
}

TEST(FarOod, ExhaustedBudgetIsGenerationError) {
  Rng rng(3);
  const Tensor centre = Tensor::from_rows({{0.0, 0.0}});
  EXPECT_THROW(far_ood_uniform(5, Box{{-1, -1}, {1, 1}}, centre, 10.0, rng), GenerationError);
}

TEST(Split, StratifiedEightyTwenty) {
  Rng rng(4);
  const auto all = two_moons(2000, 0.1, rng);
  const auto [train, test] = stratified_split(all, 0.2, rng);
  EXPECT_EQ(train.size(), 1600u);
  EXPECT_EQ(test.size(), 400u);
  int ones = 0;
  for (int l : test.labels) ones += l;
  EXPECT_EQ(ones, 200);
  EXPECT_EQ(test.split, "test");
}

TEST(Standardize, TrainingSetHasZeroMeanUnitStd) {
  Rng rng(4);
  auto all = two_moons(2000, 0.1, rng);
  auto [train, test] = stratified_split(all, 0.2, rng);
  const LabeledSet raw_test = test;
  const Standardizer st = standardize({&train, &test});
  for (std::size_t j = 0; j < 2; ++j) {
    double m = 0, s = 0;
    for (std::size_t i = 0; i < train.size(); ++i) m += train.features.at(i, j);
    m /= static_cast<double>(train.size());
    for (std::size_t i = 0; i < train.size(); ++i)
      s += (train.features.at(i, j) - m) * (train.features.at(i, j) - m);
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(s / static_cast<double>(train.size())), 1.0, 1e-9);
  }
  // the test set used the training statistics
  for (std::size_t i = 0; i < test.size(); ++i)
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_NEAR(test.features.at(i, j),
                  (raw_test.features.at(i, j) - st.mean[j]) / st.stddev[j], 1e-12);
  const Tensor back = st.invert(test.features);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], raw_test.features[i], 1e-9);
}

TEST(Standardize, ZeroStdIsContractError) {
  LabeledSet s{Tensor::from_rows({{1.0, 2.0}, {1.0, 3.0}}), {0, 1}, "train"};
  EXPECT_THROW(Standardizer::fit(s), ContractError);
}

TEST(Csv, RoundTripIsExact) {
  Rng rng(6);
  const auto s = two_moons(50, 0.1, rng);
  std::stringstream ss;
  write_labeled_csv(ss, s);
  EXPECT_EQ(ss.str().substr(0, 9), "x0,x1,lab");
  const auto back = read_labeled_csv(ss);
  ASSERT_EQ(back.size(), s.size());
  for (std::size_t i = 0; i < s.features.size(); ++i) EXPECT_EQ(back.features[i], s.features[i]);
  EXPECT_EQ(back.labels, s.labels);
}

TEST(Csv, MalformedHeaderIsIoError) {
  std::stringstream ss("a,b,label\n1,2,0\n");
  EXPECT_THROW(read_labeled_csv(ss), IoError);
}

TEST(SoftLabels, RowsMustBeSimplexPoints) {
  SoftLabeledSet ok{Tensor::from_rows({{0.0, 0.0}}), Tensor::from_rows({{0.3, 0.7}})};
  EXPECT_NO_THROW(ok.validate());
  SoftLabeledSet bad{Tensor::from_rows({{0.0, 0.0}}), Tensor::from_rows({{0.3, 0.6}})};
  EXPECT_THROW(bad.validate(), ContractError);
}
