#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "acelab/errors.hpp"
#include "acelab/rng.hpp"
#include "acelab/tensor.hpp"

namespace acelab {

/// Features with hard class labels. Labels outside {0..K-1} mark samples of
/// unseen classes (near-OOD) or unlabeled probes (far-OOD).
struct LabeledSet {
  Tensor features;          // [n x d]
  std::vector<int> labels;  // n
  std::string split = "train";

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.defined() ? features.cols() : 0; }

  std::vector<std::size_t> label_indices() const {
    std::vector<std::size_t> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0) throw ContractError("negative label");
      out[i] = static_cast<std::size_t>(labels[i]);
    }
    return out;
  }

  LabeledSet subset(const std::vector<std::size_t>& idx) const {
    const std::size_t d = dim();
    std::vector<double> f(idx.size() * d);
    std::vector<int> l(idx.size());
    const auto src = features.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) f[i * d + j] = src[idx[i] * d + j];
      l[i] = labels[idx[i]];
    }
    return {Tensor(Shape{idx.size(), d}, std::move(f)), std::move(l), split};
  }
};

/// Features with soft (probability-vector) targets.
struct SoftLabeledSet {
  Tensor features;     // [n x d]
  Tensor soft_labels;  // [n x K]

  std::size_t size() const { return features.defined() ? features.rows() : 0; }

  void validate() const {
    const std::size_t k = soft_labels.cols();
    const auto v = soft_labels.values();
    for (std::size_t i = 0; i < soft_labels.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double c = v[i * k + j];
        if (c < 0.0 || c > 1.0) throw ContractError("soft label entry outside [0,1]");
        s += c;
      }
      if (std::fabs(s - 1.0) > 1e-9) throw ContractError("soft label row does not sum to 1");
    }
  }
};

/// Points on the two interleaved half circles, labels 0 (outer) and 1 (inner),
/// with Gaussian noise of standard deviation `noise` per coordinate.
inline LabeledSet two_moons(std::size_t n, double noise, Rng& rng) {
  if (n % 2 != 0) throw ContractError("two_moons: n must be even, got " + std::to_string(n));
  if (noise < 0.0) throw ContractError("two_moons: noise must be >= 0");
  const std::size_t half = n / 2;
  std::vector<double> f(n * 2);
  std::vector<int> l(n);
  const double step = half > 1 ? std::numbers::pi / static_cast<double>(half - 1) : 0.0;
  for (std::size_t i = 0; i < half; ++i) {
    const double t = static_cast<double>(i) * step;
    f[2 * i] = std::cos(t);
    f[2 * i + 1] = std::sin(t);
    l[i] = 0;
    f[2 * (half + i)] = 1.0 - std::cos(t);
    f[2 * (half + i) + 1] = 1.0 - std::sin(t) - 0.5;
    l[half + i] = 1;
  }
  if (noise > 0.0)
    for (auto& x : f) x += noise * rng.normal();
  return {Tensor(Shape{n, 2}, std::move(f)), std::move(l), "train"};
}

/// Rotates (x, y) by `degrees` counter-clockwise about (cx, cy).
inline std::array<double, 2> rotate_about(double x, double y, double cx, double cy,
                                          double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double dx = x - cx, dy = y - cy;
  return {cx + std::cos(a) * dx - std::sin(a) * dy, cy + std::sin(a) * dx + std::cos(a) * dy};
}

/// An unseen third class: the outer moon rotated 90 degrees about (0.5, 0.25),
/// labeled `label` (default 2, outside the training label space).
inline LabeledSet near_ood_moons(std::size_t n, Rng& rng, double noise = 0.1, int label = 2) {
  if (n % 2 != 0) throw ContractError("near_ood_moons: n must be even");
  std::vector<double> f(n * 2);
  const double step = n > 1 ? std::numbers::pi / static_cast<double>(n - 1) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) * step;
    const auto p = rotate_about(std::cos(t), std::sin(t), 0.5, 0.25, 90.0);
    f[2 * i] = p[0] + noise * rng.normal();
    f[2 * i + 1] = p[1] + noise * rng.normal();
  }
  return {Tensor(Shape{n, 2}, std::move(f)), std::vector<int>(n, label), "near_ood"};
}

struct Box {
  std::vector<double> lo, hi;
};

/// Uniform samples from `box`, rejecting any proposal closer than `radius` to a
/// row of `exclude`. Labels are -1. At most 100*n proposals are drawn.
inline LabeledSet far_ood_uniform(std::size_t n, const Box& box, const Tensor& exclude,
                                  double radius, Rng& rng) {
  const std::size_t d = box.lo.size();
  if (d == 0 || box.hi.size() != d) throw ContractError("far_ood_uniform: malformed box");
  const bool have_ex = exclude.defined() && exclude.size() > 0;
  if (have_ex && exclude.cols() != d) throw ShapeError("far_ood_uniform: exclusion dim mismatch");
  std::vector<double> f;
  f.reserve(n * d);
  const std::size_t budget = 100 * n;
  std::size_t proposals = 0, accepted = 0;
  std::vector<double> p(d);
  const double r2 = radius * radius;
  while (accepted < n) {
    if (proposals++ >= budget) {
      throw GenerationError("far_ood_uniform: rejection budget of " + std::to_string(budget) +
                            " proposals exhausted after " + std::to_string(accepted) +
                            " accepted points");
    }
    for (std::size_t j = 0; j < d; ++j) p[j] = rng.uniform(box.lo[j], box.hi[j]);
    bool ok = true;
    if (have_ex) {
      const auto ex = exclude.values();
      for (std::size_t i = 0; i < exclude.rows() && ok; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (ex[i * d + j] - p[j]) * (ex[i * d + j] - p[j]);
        ok = s >= r2;
      }
    }
    if (!ok) continue;
    f.insert(f.end(), p.begin(), p.end());
    ++accepted;
  }
  if (n == 0) return {Tensor::zeros(Shape{0, d}), {}, "far_ood"};
  return {Tensor(Shape{n, d}, std::move(f)), std::vector<int>(n, -1), "far_ood"};
}

/// Stratified split: a `test_fraction` share of every class goes to the test set.
inline std::pair<LabeledSet, LabeledSet> stratified_split(const LabeledSet& data,
                                                          double test_fraction, Rng& rng) {
  int max_label = 0;
  for (int l : data.labels) max_label = std::max(max_label, l);
  std::vector<std::size_t> train_idx, test_idx;
  for (int c = 0; c <= max_label; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.labels[i] == c) members.push_back(i);
    rng.shuffle(members);
    const auto n_test = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(members.size())));
    test_idx.insert(test_idx.end(), members.begin(), members.begin() + n_test);
    train_idx.insert(train_idx.end(), members.begin() + n_test, members.end());
  }
  rng.shuffle(train_idx);
  rng.shuffle(test_idx);
  LabeledSet train = data.subset(train_idx);
  LabeledSet test = data.subset(test_idx);
  train.split = "train";
  test.split = "test";
  return {std::move(train), std::move(test)};
}

/// Per-dimension affine standardization fitted on a training set.
struct Standardizer {
  std::vector<double> mean, stddev;

  static Standardizer fit(const LabeledSet& train) {
    const std::size_t n = train.size(), d = train.dim();
    if (n == 0) throw ContractError("standardize: empty statistics source");
    Standardizer s;
    s.mean.assign(d, 0.0);
    s.stddev.assign(d, 0.0);
    const auto v = train.features.values();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += v[i * d + j];
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = v[i * d + j] - s.mean[j];
        s.stddev[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      s.stddev[j] = std::sqrt(s.stddev[j] / static_cast<double>(n));
      if (s.stddev[j] == 0.0) {
        throw ContractError("standardize: zero standard deviation in dimension " +
                            std::to_string(j));
      }
    }
    return s;
  }

  Tensor apply(const Tensor& x) const {
    const std::size_t d = mean.size();
    if (x.cols() != d) throw ShapeError("standardize: dimension mismatch");
    std::vector<double> out(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % d]) / stddev[i % d];
    return Tensor(x.shape(), std::move(out));
  }

  Tensor invert(const Tensor& x) const {
    const std::size_t d = mean.size();
    if (x.cols() != d) throw ShapeError("standardize: dimension mismatch");
    std::vector<double> out(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * stddev[i % d] + mean[i % d];
    return Tensor(x.shape(), std::move(out));
  }

  LabeledSet apply(const LabeledSet& s) const { return {apply(s.features), s.labels, s.split}; }
};

/// Fits on sets[source] and standardizes every set with those statistics.
inline Standardizer standardize(std::vector<LabeledSet*> sets, std::size_t source = 0) {
  if (source >= sets.size()) throw ContractError("standardize: no statistics source");
  const Standardizer s = Standardizer::fit(*sets[source]);
  for (auto* set : sets) *set = s.apply(*set);
  return s;
}

// ---------------------------------------------------------------------------
// CSV persistence: header `x0,...,x{d-1},label`, 17 significant digits.

inline void write_labeled_csv(std::ostream& os, const LabeledSet& s) {
  const std::size_t d = s.dim();
  for (std::size_t j = 0; j < d; ++j) os << 'x' << j << ',';
  os << "label\n";
  os << std::setprecision(17);
  const auto v = s.features.values();
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) os << v[i * d + j] << ',';
    os << s.labels[i] << '\n';
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

inline LabeledSet read_labeled_csv(std::istream& is, std::string split = "train") {
  std::string line;
  if (!std::getline(is, line)) throw IoError("labeled CSV: missing header");
  const auto header = split_csv_line(line);
  if (header.empty() || header.back() != "label") throw IoError("labeled CSV: bad header");
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j)
    if (header[j] != "x" + std::to_string(j)) throw IoError("labeled CSV: bad header");
  std::vector<double> f;
  std::vector<int> l;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != d + 1) throw IoError("labeled CSV: ragged row");
    for (std::size_t j = 0; j < d; ++j) f.push_back(std::stod(cells[j]));
    l.push_back(std::stoi(cells[d]));
  }
  const std::size_t n = l.size();
  return {Tensor(Shape{n, d}, std::move(f)), std::move(l), std::move(split)};
}

}  // namespace acelab
