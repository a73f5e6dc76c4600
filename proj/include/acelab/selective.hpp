#pragma once

// Selective prediction: the discriminator density gates the fine-tuned
// classifier. Inputs scoring below the threshold are abstained on.

#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include "acelab/classifier.hpp"
#include "acelab/pce.hpp"

namespace acelab {

struct Predicted {
  std::vector<double> probs;
  double entropy = 0.0;
  double density = 0.0;
};

struct Abstained {
  double density = 0.0;
};

using Decision = std::variant<Predicted, Abstained>;

inline bool is_abstained(const Decision& d) { return std::holds_alternative<Abstained>(d); }

inline double density_of(const Decision& d) {
  return std::visit([](const auto& v) { return v.density; }, d);
}

/// The threshold rule on its own: predict when density >= h.
inline Decision apply_threshold(std::vector<double> probs, double density, double h) {
  if (density >= h) {
    const std::size_t k = probs.size();
    const double entropy = predictive_entropy(Tensor(Shape{1, k}, probs))[0];
    return Predicted{std::move(probs), entropy, density};
  }
  return Abstained{density};
}

class SelectiveClassifier {
 public:
  SelectiveClassifier(Classifier classifier, PCE pce, double h)
      : classifier_(std::move(classifier)), pce_(std::move(pce)), h_(h) {
    if (!(h_ > 0.0 && h_ < 1.0)) throw ContractError("selective threshold outside (0,1)");
    classifier_.set_frozen(true);
  }

  std::vector<Decision> decide(const Tensor& x) const {
    NoGradGuard no_grad;
    const auto density = pce_.density(x);
    const Tensor p = classifier_.predict_proba(x);
    const std::size_t k = p.cols();
    std::vector<Decision> out;
    out.reserve(density.size());
    const auto pv = p.values();
    for (std::size_t i = 0; i < density.size(); ++i) {
      std::vector<double> row(pv.begin() + static_cast<long>(i * k),
                              pv.begin() + static_cast<long>((i + 1) * k));
      out.push_back(apply_threshold(std::move(row), density[i], h_));
    }
    return out;
  }

  double threshold() const { return h_; }
  const Classifier& classifier() const { return classifier_; }
  const PCE& pce() const { return pce_; }

 private:
  Classifier classifier_;
  PCE pce_;
  double h_;
};

struct CoverageRow {
  std::string set;
  std::size_t count = 0;
  double abstention_rate = 0.0;
  std::optional<double> covered_accuracy;  // only for sets with in-range labels
  std::optional<double> covered_entropy;   // mean PE over predicted samples
  double mean_density = 0.0;
};

struct NamedSet {
  std::string name;
  const LabeledSet* data = nullptr;
};

inline CoverageRow coverage_of(const std::string& name, const std::vector<Decision>& ds,
                               const std::vector<int>& labels) {
  CoverageRow row;
  row.set = name;
  row.count = ds.size();
  if (ds.empty()) return row;
  std::size_t abstained = 0, covered = 0, correct = 0;
  bool labeled = true;
  double pe = 0.0, dens = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    dens += density_of(ds[i]);
    if (const auto* p = std::get_if<Predicted>(&ds[i])) {
      ++covered;
      pe += p->entropy;
      const int y = labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= p->probs.size()) labeled = false;
      const auto best = static_cast<int>(std::max_element(p->probs.begin(), p->probs.end()) - p->probs.begin());
      correct += best == y;
    } else {
      ++abstained;
    }
  }
  const auto n = static_cast<double>(ds.size());
  row.abstention_rate = static_cast<double>(abstained) / n;
  row.mean_density = dens / n;
  if (covered > 0) {
    row.covered_entropy = pe / static_cast<double>(covered);
    if (labeled) row.covered_accuracy = static_cast<double>(correct) / static_cast<double>(covered);
  }
  return row;
}

/// Abstention rate, covered accuracy, covered mean PE and mean density per set.
inline std::vector<CoverageRow> coverage_report(const SelectiveClassifier& sc,
                                                const std::vector<NamedSet>& sets) {
  std::vector<CoverageRow> out;
  for (const auto& s : sets) out.push_back(coverage_of(s.name, sc.decide(s.data->features), s.data->labels));
  return out;
}

/// Columns sample_id, set, density, decision, predicted_class, entropy. Abstained
/// rows leave the last two cells empty.
inline void write_decisions_csv(std::ostream& os, const std::string& set,
                                const std::vector<Decision>& ds, bool header = true) {
  if (header) os << "sample_id,set,density,decision,predicted_class,entropy\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << i << ',' << set << ',' << density_of(ds[i]) << ',';
    if (const auto* p = std::get_if<Predicted>(&ds[i])) {
      const auto best = std::max_element(p->probs.begin(), p->probs.end()) - p->probs.begin();
      os << "predict," << best << ',' << p->entropy << '\n';
    } else {
      os << "abstain,,\n";
    }
  }
}

}  // namespace acelab
