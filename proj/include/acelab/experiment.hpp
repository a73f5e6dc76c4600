#pragma once

// End-to-end experiment runner. Every stage reads the artifacts of earlier
// stages from the output directory and writes its own; a config plus the
// code version determines every output byte.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "acelab/ace.hpp"
#include "acelab/archive.hpp"
#include "acelab/attacks.hpp"
#include "acelab/classifier.hpp"
#include "acelab/data.hpp"
#include "acelab/metrics.hpp"
#include "acelab/pce.hpp"
#include "acelab/selective.hpp"

namespace acelab {

inline constexpr int kMetricsSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  std::size_t n_samples = 2000;
  double noise = 0.1;
  double test_fraction = 0.2;
  std::size_t near_ood_samples = 400;
  std::size_t far_ood_samples = 400;
  double far_ood_half_width = 4.0;  // box [-w, w]^d in standardized units
  double far_ood_radius = 0.5;
};

struct BaselineConfig {
  std::size_t mc_samples = 20;
  std::size_t ensemble_size = 5;
  double aid_fraction = 0.05;
};

struct AceConfig {
  std::size_t augmentations = 4;
  double ratio = 0.3;
  double source_fraction = 0.5;
  FinetuneConfig finetune{};
  std::size_t traversal_steps = 11;
  std::size_t traversal_points = 100;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t replicates = 3;
  DataConfig data{};
  ClassifierConfig classifier{};
  BaselineConfig baselines{};
  PCEConfig pce{};
  AceConfig ace{};
  double threshold = 0.5;
  double target_tpr = 0.95;
  AttackConfig attacks{};
  double cw_box_widen = 3.0;
  std::string output_dir = "runs/two-moons";

  std::vector<std::uint64_t> replicate_seeds() const {
    std::vector<std::uint64_t> s;
    for (std::size_t r = 0; r < replicates; ++r) s.push_back(seed + r);
    return s;
  }
};

inline json to_json(const ExperimentConfig& c) {
  return json{
      {"seed", c.seed},
      {"replicates", c.replicates},
      {"data",
       {{"n_samples", c.data.n_samples},
        {"noise", c.data.noise},
        {"test_fraction", c.data.test_fraction},
        {"near_ood_samples", c.data.near_ood_samples},
        {"far_ood_samples", c.data.far_ood_samples},
        {"far_ood_half_width", c.data.far_ood_half_width},
        {"far_ood_radius", c.data.far_ood_radius}}},
      {"classifier",
       {{"hidden", c.classifier.hidden},
        {"dropout", c.classifier.dropout},
        {"epochs", c.classifier.epochs},
        {"batch_size", c.classifier.batch_size},
        {"lr", c.classifier.adam.lr},
        {"ece_bins", c.classifier.ece_bins}}},
      {"baselines",
       {{"mc_samples", c.baselines.mc_samples},
        {"ensemble_size", c.baselines.ensemble_size},
        {"aid_fraction", c.baselines.aid_fraction}}},
      {"pce",
       {{"lambda_adv", c.pce.lambda_adv},
        {"lambda_f", c.pce.lambda_f},
        {"lambda_rec", c.pce.lambda_rec},
        {"path_length_decay", c.pce.path_length_decay},
        {"epochs", c.pce.epochs},
        {"subset_fraction", c.pce.subset_fraction},
        {"batch_size", c.pce.batch_size},
        {"latent_dim", c.pce.latent_dim},
        {"fusion", c.pce.fusion},
        {"lr", c.pce.adam.lr},
        {"beta1", c.pce.adam.beta1},
        {"beta2", c.pce.adam.beta2}}},
      {"ace",
       {{"augmentations", c.ace.augmentations},
        {"ratio", c.ace.ratio},
        {"source_fraction", c.ace.source_fraction},
        {"finetune_epochs", c.ace.finetune.epochs},
        {"finetune_lr", c.ace.finetune.lr},
        {"finetune_batch_size", c.ace.finetune.batch_size},
        {"traversal_steps", c.ace.traversal_steps},
        {"traversal_points", c.ace.traversal_points}}},
      {"selective", {{"threshold", c.threshold}}},
      {"metrics", {{"target_tpr", c.target_tpr}}},
      {"attacks",
       {{"fgsm_eps", c.attacks.fgsm_eps},
        {"cw_iters", c.attacks.cw_iters},
        {"cw_c", c.attacks.cw.c},
        {"cw_lr", c.attacks.cw.lr},
        {"cw_kappas", c.attacks.cw_kappas},
        {"cw_box_widen", c.cw_box_widen},
        {"deepfool_iters", c.attacks.deepfool_iters},
        {"deepfool_overshoot", c.attacks.deepfool_overshoot}}},
      {"output_dir", c.output_dir},
  };
}

namespace detail {

inline bool same_kind(const json& expected, const json& got) {
  if (expected.is_number_float()) return got.is_number();
  // literals built in code arrive as signed integers
  if (expected.is_number_unsigned()) return got.is_number_integer() && got.get<std::int64_t>() >= 0;
  if (expected.is_number_integer()) return got.is_number_integer();
  if (expected.is_boolean()) return got.is_boolean();
  if (expected.is_string()) return got.is_string();
  if (expected.is_object()) return got.is_object();
  if (expected.is_array()) return got.is_array();
  return false;
}

inline std::string kind_name(const json& expected) {
  if (expected.is_number_unsigned()) return "non-negative integer";
  if (expected.is_number_integer()) return "integer";
  return expected.type_name();
}

// Structural check against the defaults: unknown keys and wrong value kinds.
inline void schema_walk(const json& expected, const json& got, const std::string& path,
                        std::vector<std::string>& bad) {
  for (auto it = got.begin(); it != got.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!expected.contains(it.key())) {
      bad.push_back(key + " (unknown key)");
      continue;
    }
    const json& e = expected.at(it.key());
    if (!same_kind(e, *it)) {
      bad.push_back(key + " (expected " + kind_name(e) + ")");
      continue;
    }
    if (e.is_object()) {
      schema_walk(e, *it, key, bad);
    } else if (e.is_array() && !e.empty()) {
      for (const auto& v : *it)
        if (!same_kind(e.front(), v)) {
          bad.push_back(key + " (elements must be " + kind_name(e.front()) + ")");
          break;
        }
    }
  }
}

template <class T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

/// Range checks on a parsed config; returns offending keys with reasons.
inline std::vector<std::string> config_problems(const ExperimentConfig& c) {
  std::vector<std::string> bad;
  auto need = [&](bool ok, const char* key, const char* why) {
    if (!ok) bad.push_back(std::string(key) + " (" + why + ")");
  };
  need(c.replicates >= 1, "replicates", "must be >= 1");
  need(c.data.n_samples >= 4 && c.data.n_samples % 2 == 0, "data.n_samples", "must be even and >= 4");
  need(c.data.noise >= 0.0, "data.noise", "must be >= 0");
  need(c.data.test_fraction > 0.0 && c.data.test_fraction < 1.0, "data.test_fraction", "must be in (0,1)");
  need(c.data.near_ood_samples >= 2 && c.data.near_ood_samples % 2 == 0, "data.near_ood_samples",
       "must be even and >= 2");
  need(c.data.far_ood_samples >= 1, "data.far_ood_samples", "must be >= 1");
  need(c.data.far_ood_half_width > 0.0, "data.far_ood_half_width", "must be > 0");
  need(c.data.far_ood_radius >= 0.0, "data.far_ood_radius", "must be >= 0");
  need(c.classifier.hidden >= 1, "classifier.hidden", "must be >= 1");
  need(c.classifier.dropout >= 0.0 && c.classifier.dropout < 1.0, "classifier.dropout", "must be in [0,1)");
  need(c.classifier.epochs >= 1, "classifier.epochs", "must be >= 1");
  need(c.classifier.batch_size >= 2, "classifier.batch_size", "must be >= 2");
  need(c.classifier.adam.lr > 0.0, "classifier.lr", "must be > 0");
  need(c.classifier.ece_bins >= 1, "classifier.ece_bins", "must be >= 1");
  need(c.baselines.mc_samples >= 1, "baselines.mc_samples", "must be >= 1");
  need(c.baselines.ensemble_size != 1, "baselines.ensemble_size", "must be 0 (off) or >= 2");
  need(c.baselines.aid_fraction >= 0.05 && c.baselines.aid_fraction <= 0.10, "baselines.aid_fraction",
       "must be in [0.05, 0.10]");
  need(c.pce.lambda_adv >= 0.0, "pce.lambda_adv", "must be >= 0");
  need(c.pce.lambda_f >= 0.0, "pce.lambda_f", "must be >= 0");
  need(c.pce.lambda_rec >= 0.0, "pce.lambda_rec", "must be >= 0");
  need(c.pce.path_length_decay >= 0.0 && c.pce.path_length_decay <= 1.0, "pce.path_length_decay",
       "must be in [0,1]");
  need(c.pce.epochs >= 1, "pce.epochs", "must be >= 1");
  need(c.pce.subset_fraction > 0.0 && c.pce.subset_fraction <= 1.0, "pce.subset_fraction", "must be in (0,1]");
  need(c.pce.batch_size >= 1, "pce.batch_size", "must be >= 1");
  need(c.pce.latent_dim >= 1, "pce.latent_dim", "must be >= 1");
  need(c.pce.adam.lr > 0.0, "pce.lr", "must be > 0");
  need(c.ace.augmentations >= 1, "ace.augmentations", "must be >= 1");
  need(c.ace.ratio >= 0.0 && c.ace.ratio <= 1.0, "ace.ratio", "must be in [0,1]");
  need(c.ace.source_fraction > 0.0 && c.ace.source_fraction <= 1.0, "ace.source_fraction", "must be in (0,1]");
  need(c.ace.finetune.lr > 0.0, "ace.finetune_lr", "must be > 0");
  need(c.ace.finetune.batch_size >= 2, "ace.finetune_batch_size", "must be >= 2");
  need(c.ace.traversal_steps >= 2, "ace.traversal_steps", "must be >= 2");
  need(c.ace.traversal_points >= 1, "ace.traversal_points", "must be >= 1");
  need(c.threshold > 0.0 && c.threshold < 1.0, "selective.threshold", "must be in (0,1)");
  need(c.target_tpr > 0.0 && c.target_tpr <= 1.0, "metrics.target_tpr", "must be in (0,1]");
  need(std::all_of(c.attacks.fgsm_eps.begin(), c.attacks.fgsm_eps.end(), [](double e) { return e >= 0.0; }),
       "attacks.fgsm_eps", "entries must be >= 0");
  need(std::all_of(c.attacks.cw_kappas.begin(), c.attacks.cw_kappas.end(), [](double k) { return k >= 0.0; }),
       "attacks.cw_kappas", "entries must be >= 0");
  need(c.attacks.cw.c >= 0.0, "attacks.cw_c", "must be >= 0");
  need(c.attacks.cw.lr > 0.0, "attacks.cw_lr", "must be > 0");
  need(c.attacks.deepfool_overshoot > 0.0, "attacks.deepfool_overshoot", "must be > 0");
  need(c.cw_box_widen >= 0.0, "attacks.cw_box_widen", "must be >= 0");
  need(!c.output_dir.empty(), "output_dir", "must not be empty");
  return bad;
}

/// Parses and validates; missing keys keep their defaults.
inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config: top level must be an object");
  std::vector<std::string> bad;
  detail::schema_walk(to_json(ExperimentConfig{}), j, "", bad);
  if (!bad.empty()) {
    std::string msg = "config: invalid keys:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ValidationError(msg);
  }
  ExperimentConfig c;
  using detail::take;
  take(j, "seed", c.seed);
  take(j, "replicates", c.replicates);
  take(j, "output_dir", c.output_dir);
  if (j.contains("data")) {
    const json& d = j["data"];
    take(d, "n_samples", c.data.n_samples);
    take(d, "noise", c.data.noise);
    take(d, "test_fraction", c.data.test_fraction);
    take(d, "near_ood_samples", c.data.near_ood_samples);
    take(d, "far_ood_samples", c.data.far_ood_samples);
    take(d, "far_ood_half_width", c.data.far_ood_half_width);
    take(d, "far_ood_radius", c.data.far_ood_radius);
  }
  if (j.contains("classifier")) {
    const json& d = j["classifier"];
    take(d, "hidden", c.classifier.hidden);
    take(d, "dropout", c.classifier.dropout);
    take(d, "epochs", c.classifier.epochs);
    take(d, "batch_size", c.classifier.batch_size);
    take(d, "lr", c.classifier.adam.lr);
    take(d, "ece_bins", c.classifier.ece_bins);
  }
  if (j.contains("baselines")) {
    const json& d = j["baselines"];
    take(d, "mc_samples", c.baselines.mc_samples);
    take(d, "ensemble_size", c.baselines.ensemble_size);
    take(d, "aid_fraction", c.baselines.aid_fraction);
  }
  if (j.contains("pce")) {
    const json& d = j["pce"];
    take(d, "lambda_adv", c.pce.lambda_adv);
    take(d, "lambda_f", c.pce.lambda_f);
    take(d, "lambda_rec", c.pce.lambda_rec);
    take(d, "path_length_decay", c.pce.path_length_decay);
    take(d, "epochs", c.pce.epochs);
    take(d, "subset_fraction", c.pce.subset_fraction);
    take(d, "batch_size", c.pce.batch_size);
    take(d, "latent_dim", c.pce.latent_dim);
    take(d, "fusion", c.pce.fusion);
    take(d, "lr", c.pce.adam.lr);
    take(d, "beta1", c.pce.adam.beta1);
    take(d, "beta2", c.pce.adam.beta2);
  }
  if (j.contains("ace")) {
    const json& d = j["ace"];
    take(d, "augmentations", c.ace.augmentations);
    take(d, "ratio", c.ace.ratio);
    take(d, "source_fraction", c.ace.source_fraction);
    take(d, "finetune_epochs", c.ace.finetune.epochs);
    take(d, "finetune_lr", c.ace.finetune.lr);
    take(d, "finetune_batch_size", c.ace.finetune.batch_size);
    take(d, "traversal_steps", c.ace.traversal_steps);
    take(d, "traversal_points", c.ace.traversal_points);
  }
  if (j.contains("selective")) detail::take(j["selective"], "threshold", c.threshold);
  if (j.contains("metrics")) detail::take(j["metrics"], "target_tpr", c.target_tpr);
  if (j.contains("attacks")) {
    const json& d = j["attacks"];
    take(d, "fgsm_eps", c.attacks.fgsm_eps);
    take(d, "cw_iters", c.attacks.cw_iters);
    take(d, "cw_c", c.attacks.cw.c);
    take(d, "cw_lr", c.attacks.cw.lr);
    take(d, "cw_kappas", c.attacks.cw_kappas);
    take(d, "cw_box_widen", c.cw_box_widen);
    take(d, "deepfool_iters", c.attacks.deepfool_iters);
    take(d, "deepfool_overshoot", c.attacks.deepfool_overshoot);
  }
  c.ace.finetune.ece_bins = c.classifier.ece_bins;
  bad = config_problems(c);
  if (!bad.empty()) {
    std::string msg = "config: invalid values:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ValidationError(msg);
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Metrics records

struct MetricRow {
  std::string model;
  std::string dataset;
  std::string metric;
  double value = 0.0;
};

inline json metrics_json(const std::vector<MetricRow>& rows, const json& extra = json::object()) {
  json results = json::array();
  for (const auto& r : rows)
    results.push_back({{"model", r.model}, {"dataset", r.dataset}, {"metric", r.metric}, {"value", r.value}});
  json out = extra;
  out["schema_version"] = kMetricsSchemaVersion;
  out["results"] = results;
  return out;
}

inline std::vector<MetricRow> metrics_rows(const json& j) {
  std::vector<MetricRow> rows;
  for (const auto& r : j.at("results"))
    rows.push_back({r.at("model").get<std::string>(), r.at("dataset").get<std::string>(),
                    r.at("metric").get<std::string>(), r.at("value").get<double>()});
  return rows;
}

/// Value of one (model, dataset, metric) entry; throws when absent.
inline double metric_value(const std::vector<MetricRow>& rows, const std::string& model,
                           const std::string& dataset, const std::string& metric) {
  for (const auto& r : rows)
    if (r.model == model && r.dataset == dataset && r.metric == metric) return r.value;
  throw ContractError("no metric " + model + "/" + dataset + "/" + metric);
}

// ---------------------------------------------------------------------------
// Augmented-set CSV reading (writing lives with the generator)

inline AugmentedSet read_augmented_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("augmented CSV: missing header");
  const auto header = split_csv_line(line);
  std::size_t d = 0, k = 0;
  while (d < header.size() && header[d] == "x" + std::to_string(d)) ++d;
  while (d + k < header.size() && header[d + k] == "c" + std::to_string(k)) ++k;
  if (d == 0 || k < 2 || header.size() != d + k + 2 || header[d + k] != "source_index" ||
      header[d + k + 1] != "u") {
    throw IoError("augmented CSV: bad header");
  }
  AugmentedSet a;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != d + k + 2) throw IoError("augmented CSV: ragged row");
    AugmentedSample s;
    for (std::size_t j = 0; j < d; ++j) s.x_hat.push_back(std::stod(cells[j]));
    for (std::size_t j = 0; j < k; ++j) s.soft_label.c.push_back(std::stod(cells[d + j]));
    s.source_index = std::stoul(cells[d + k]);
    s.u = std::stod(cells[d + k + 1]);
    a.samples.push_back(std::move(s));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Runner

enum class Stage { gen_data, train_classifier, train_pce, augment, finetune, evaluate, attack, ablate, report };

inline const std::vector<std::pair<std::string, Stage>>& stage_names() {
  static const std::vector<std::pair<std::string, Stage>> names{
      {"gen-data", Stage::gen_data},   {"train-classifier", Stage::train_classifier},
      {"train-pce", Stage::train_pce}, {"augment", Stage::augment},
      {"finetune", Stage::finetune},   {"evaluate", Stage::evaluate},
      {"attack", Stage::attack},       {"ablate", Stage::ablate},
      {"report", Stage::report}};
  return names;
}

inline Stage parse_stage(const std::string& s) {
  for (const auto& [name, st] : stage_names())
    if (name == s) return st;
  throw ValidationError("unknown stage '" + s + "'");
}

struct AblationArm {
  std::string tag;
  double PCEConfig::*weight;
};

inline const std::vector<AblationArm>& ablation_arms() {
  static const std::vector<AblationArm> arms{{"no-adv", &PCEConfig::lambda_adv},
                                             {"no-f", &PCEConfig::lambda_f},
                                             {"no-rec", &PCEConfig::lambda_rec}};
  return arms;
}

class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, std::ostream* log = &std::clog)
      : cfg_(std::move(cfg)), out_(cfg_.output_dir), log_(log) {
    const auto bad = config_problems(cfg_);
    if (!bad.empty()) throw ValidationError("config: invalid values: " + bad.front());
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& out() const { return out_; }
  std::uint64_t reference_seed() const { return cfg_.seed; }

  fs::path seed_dir(std::uint64_t seed) const { return out_ / ("seed-" + std::to_string(seed)); }

  /// Per-replicate stages run for every replicate seed; attack and ablate use
  /// the reference seed only.
  void run(Stage st) {
    const auto t0 = std::chrono::steady_clock::now();
    switch (st) {
      case Stage::gen_data: for_each_seed([&](auto s) { gen_data(s); }); break;
      case Stage::train_classifier: for_each_seed([&](auto s) { train_classifier_stage(s); }); break;
      case Stage::train_pce: for_each_seed([&](auto s) { train_pce_stage(s, cfg_.pce, "pce"); }); break;
      case Stage::augment: for_each_seed([&](auto s) { augment(s); }); break;
      case Stage::finetune: for_each_seed([&](auto s) { finetune_stage(s); }); break;
      case Stage::evaluate: for_each_seed([&](auto s) { evaluate(s); }); break;
      case Stage::attack: attack(reference_seed()); break;
      case Stage::ablate: ablate(reference_seed()); break;
      case Stage::report: report(); break;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    say(stage_label(st) + " done in " + fixed(secs, 1) + " s");
  }

  void run_all() {
    for (const auto& [name, st] : stage_names()) run(st);
  }

  // -- stages --------------------------------------------------------------

  void gen_data(std::uint64_t seed) {
    const fs::path dir = seed_dir(seed);
    Rng rng = Rng(seed).child("data");
    const auto& d = cfg_.data;
    auto all = two_moons(d.n_samples, d.noise, rng);
    auto [train, test] = stratified_split(all, d.test_fraction, rng);
    auto near = near_ood_moons(d.near_ood_samples, rng, d.noise);
    const Standardizer st = standardize({&train, &test, &near});
    const std::size_t dim = train.dim();
    const Box box{std::vector<double>(dim, -d.far_ood_half_width), std::vector<double>(dim, d.far_ood_half_width)};
    auto far = far_ood_uniform(d.far_ood_samples, box, train.features, d.far_ood_radius, rng);
    write_set(dir / "train.csv", train);
    write_set(dir / "test.csv", test);
    write_set(dir / "near_ood.csv", near);
    write_set(dir / "far_ood.csv", far);
    write_atomic(dir / "standardizer.json", json{{"mean", st.mean}, {"std", st.stddev}}.dump(2) + "\n");
  }

  void train_classifier_stage(std::uint64_t seed) {
    const fs::path dir = seed_dir(seed);
    const auto train = read_set(dir / "train.csv", "gen-data");
    const auto test = read_set(dir / "test.csv", "gen-data");
    Rng rng = Rng(seed).child("classifier");
    const auto t = train_classifier(train, &test, cfg_.classifier, rng);
    save_classifier(dir / "classifier", t.model, t.report);
    if (cfg_.baselines.ensemble_size >= 2) {
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 0; i < cfg_.baselines.ensemble_size; ++i)
        seeds.push_back(Rng(seed).child("ensemble-" + std::to_string(i)).seed());
      std::vector<TrainReport> reports;
      const auto e = train_ensemble(train, &test, cfg_.classifier, seeds, &reports);
      for (std::size_t i = 0; i < e.members.size(); ++i)
        save_classifier(dir / ("ensemble-" + std::to_string(i)), e.members[i], reports[i]);
    }
  }

  void train_pce_stage(std::uint64_t seed, const PCEConfig& pcfg, const std::string& tag) {
    const fs::path dir = seed_dir(seed);
    const auto train = read_set(dir / "train.csv", "gen-data");
    const Classifier f = load_classifier(dir / "classifier", "train-classifier");
    Rng rng = Rng(seed).child("pce");
    const auto t = train_pce(f, train, pcfg, rng);
    const std::size_t last = t.curve.epochs();
    const double kl_first = t.curve.epoch_mean(1, &CurveRow::l_f);
    const double kl_last = t.curve.epoch_mean(last, &CurveRow::l_f);
    json meta{{"config", pce_json(pcfg)}, {"kl_epoch_first", kl_first}, {"kl_epoch_last", kl_last},
              {"epochs", last}};
    save_archive(WeightArchive::from_state("pce", t.pce.state(), meta), dir / tag);
    std::ostringstream os;
    os << "step,epoch,loss_d,loss_g_adv,l_reg,l_f,l_rec,a\n" << std::setprecision(17);
    for (const auto& r : t.curve.rows)
      os << r.step << ',' << r.epoch << ',' << r.loss_d << ',' << r.loss_g_adv << ',' << r.l_reg << ','
         << r.l_f << ',' << r.l_rec << ',' << r.a << '\n';
    write_atomic(dir / (tag + "_curve.csv"), os.str());
  }

  void augment(std::uint64_t seed) {
    const fs::path dir = seed_dir(seed);
    const auto train = read_set(dir / "train.csv", "gen-data");
    const Classifier f = load_classifier(dir / "classifier", "train-classifier");
    const PCE pce = load_pce(dir / "pce", f, "train-pce");
    Rng rng = Rng(seed).child("augment");
    const auto source = select_source(train, cfg_.ace.source_fraction, rng);
    const auto aug = generate_ace(pce, f, source, cfg_.ace.augmentations, rng);
    std::ostringstream os;
    write_augmented_csv(os, aug);
    write_atomic(dir / "ace.csv", os.str());
  }

  void finetune_stage(std::uint64_t seed) {
    const fs::path dir = seed_dir(seed);
    const auto train = read_set(dir / "train.csv", "gen-data");
    const auto test = read_set(dir / "test.csv", "gen-data");
    const Classifier f = load_classifier(dir / "classifier", "train-classifier");
    require(dir / "ace.csv", "augment");
    std::ifstream is(dir / "ace.csv");
    const auto aug = read_augmented_csv(is);
    Rng rng = Rng(seed).child("finetune");
    const auto mixed = build_mixed(train, aug, cfg_.ace.ratio, f.num_classes(), rng);
    const auto t = finetune(f, mixed, cfg_.ace.finetune, &test, rng);
    save_classifier(dir / "finetuned", t.model, t.report);
  }

  void evaluate(std::uint64_t seed) {
    const fs::path dir = seed_dir(seed);
    const auto train = read_set(dir / "train.csv", "gen-data");
    const auto test = read_set(dir / "test.csv", "gen-data");
    const auto near = read_set(dir / "near_ood.csv", "gen-data");
    const auto far = read_set(dir / "far_ood.csv", "gen-data");
    const Classifier base = load_classifier(dir / "classifier", "train-classifier");
    const Classifier tuned = load_classifier(dir / "finetuned", "finetune");
    const auto pce_archive = load_archive_or_throw(dir / "pce", "train-pce");
    const PCE pce = load_pce(dir / "pce", base, "train-pce");
    const Rng root(seed);
    std::vector<MetricRow> rows;
    const std::vector<std::pair<std::string, const LabeledSet*>> sets{
        {"test", &test}, {"near_ood", &near}, {"far_ood", &far}};

    // probabilities per model and set
    std::vector<std::pair<std::string, std::function<Tensor(const Tensor&, const std::string&)>>> models;
    models.emplace_back("baseline", [&](const Tensor& x, const std::string&) { return base.predict_proba(x); });
    models.emplace_back("mc-dropout", [&](const Tensor& x, const std::string& set) {
      Rng r = root.child("mc-eval-" + set);
      return mc_dropout_proba(base, x, cfg_.baselines.mc_samples, r);
    });
    EnsembleClassifier ens;
    if (cfg_.baselines.ensemble_size >= 2) {
      for (std::size_t i = 0; i < cfg_.baselines.ensemble_size; ++i)
        ens.members.push_back(load_classifier(dir / ("ensemble-" + std::to_string(i)), "train-classifier"));
      models.emplace_back("ensemble", [&](const Tensor& x, const std::string&) { return ens.predict_proba(x); });
    }
    models.emplace_back("ace", [&](const Tensor& x, const std::string&) { return tuned.predict_proba(x); });

    // AiD pseudo-labels from baseline MC-Dropout entropy on the test set
    Rng aid_rng = root.child("aid");
    const auto aid = label_aid(base, test, cfg_.baselines.aid_fraction, cfg_.baselines.mc_samples, aid_rng);
    std::vector<int> is_aid(test.size(), 0);
    for (std::size_t i : aid) is_aid[i] = 1;

    for (const auto& [name, proba] : models) {
      std::map<std::string, std::vector<double>> pe;
      for (const auto& [set, data] : sets) {
        const Tensor p = proba(data->features, set);
        pe[set] = predictive_entropy(p);
        write_scores(dir / "scores" / (name + "_" + set + "_pe.csv"), pe[set]);
        rows.push_back({name, set, "mean_pe", mean_of(pe[set])});
        if (set == "test") {
          rows.push_back({name, "test", "accuracy", accuracy(p, test.labels)});
          rows.push_back({name, "test", "ece", ece(p, test.labels, cfg_.classifier.ece_bins)});
        }
      }
      ScoredBinarySet aid_set;
      std::vector<double> aid_pe;
      for (std::size_t i = 0; i < test.size(); ++i) {
        aid_set.scores.push_back(pe["test"][i]);
        aid_set.labels.push_back(is_aid[i]);
        if (is_aid[i]) aid_pe.push_back(pe["test"][i]);
      }
      rows.push_back({name, "aid", "auc", auc_roc(aid_set)});
      rows.push_back({name, "aid", "tnr_at_tpr95", tnr_at_tpr(aid_set, cfg_.target_tpr)});
      rows.push_back({name, "aid", "mean_pe", mean_of(aid_pe)});
      for (const std::string set : {"near_ood", "far_ood"}) {
        const auto r = ood_eval(pe["test"], pe[set], ScoreDirection::high_means_ood, cfg_.target_tpr);
        rows.push_back({name, set, "auc", r.auc});
        rows.push_back({name, set, "tnr_at_tpr95", r.tnr_at_tpr95});
      }
    }

    // explainer: density detection, consistency diagnostics, selective head
    std::map<std::string, std::vector<double>> density;
    for (const auto& [set, data] : sets) {
      density[set] = pce.density(data->features);
      write_scores(dir / "scores" / ("pce_" + set + "_density.csv"), density[set]);
      rows.push_back({"pce", set, "mean_density", mean_of(density[set])});
    }
    for (const std::string set : {"near_ood", "far_ood"}) {
      const auto r = ood_eval(density["test"], density[set], ScoreDirection::high_means_id, cfg_.target_tpr);
      rows.push_back({"pce", set, "density_auc", r.auc});
      rows.push_back({"pce", set, "density_tnr_at_tpr95", r.tnr_at_tpr95});
    }
    append_pce_diagnostics(rows, "pce", pce, pce_archive, train, test, root);

    const SelectiveClassifier sc(tuned, pce, cfg_.threshold);
    std::ostringstream decisions;
    bool header = true;
    for (const auto& [set, data] : sets) {
      const auto ds = sc.decide(data->features);
      write_decisions_csv(decisions, set, ds, header);
      header = false;
      const auto cov = coverage_of(set, ds, data->labels);
      rows.push_back({"selective", set, "abstention_rate", cov.abstention_rate});
      if (cov.covered_accuracy) rows.push_back({"selective", set, "covered_accuracy", *cov.covered_accuracy});
      if (cov.covered_entropy) rows.push_back({"selective", set, "covered_mean_pe", *cov.covered_entropy});
    }
    write_atomic(dir / "decisions.csv", decisions.str());

    // boundary traversal from the first test points, original class = prediction
    const std::size_t n_trav = std::min(cfg_.ace.traversal_points, test.size());
    std::vector<std::size_t> idx(n_trav);
    for (std::size_t i = 0; i < n_trav; ++i) idx[i] = i;
    const auto probe = test.subset(idx);
    const auto pred = base.predict(probe.features);
    std::ostringstream trav;
    trav << "point,step,c_k,x0,x1,p_k\n" << std::setprecision(17);
    double monotone = 0.0;
    for (std::size_t k = 0; k < base.num_classes(); ++k) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < n_trav; ++i)
        if (pred[i] == k) members.push_back(i);
      if (members.empty()) continue;
      const std::size_t k_c = k == 0 ? 1 : 0;
      const auto path = traversal(pce, base, probe.subset(members).features, k, k_c, cfg_.ace.traversal_steps);
      monotone += monotone_fraction(path, k) * static_cast<double>(members.size());
      for (std::size_t s = 0; s < path.size(); ++s)
        for (std::size_t m = 0; m < members.size(); ++m)
          trav << members[m] << ',' << s << ',' << path[s].condition.c[k] << ',' << path[s].x_hat.at(m, 0)
               << ',' << path[s].x_hat.at(m, 1) << ',' << path[s].probs.at(m, k) << '\n';
    }
    rows.push_back({"pce", "test", "traversal_monotone_fraction", monotone / static_cast<double>(n_trav)});
    write_atomic(dir / "traversal.csv", trav.str());

    write_atomic(dir / "metrics.json", metrics_json(rows, {{"seed", seed}, {"stage", "evaluate"}}).dump(2) + "\n");
  }

  void attack(std::uint64_t seed) {
    const fs::path dir = seed_dir(seed);
    const auto test = read_set(dir / "test.csv", "gen-data");
    const Classifier base = load_classifier(dir / "classifier", "train-classifier");
    const Classifier tuned = load_classifier(dir / "finetuned", "finetune");
    const std::vector<NamedModel> models{{"baseline", &base}, {"ace", &tuned}};
    const Box box = data_box(test.features, cfg_.cw_box_widen);
    std::vector<SweepRow> sweep;
    for (AttackKind k : {AttackKind::fgsm, AttackKind::deepfool, AttackKind::deepfool_best}) {
      auto r = robustness_sweep(models, k, cfg_.attacks, test, box);
      sweep.insert(sweep.end(), r.begin(), r.end());
    }
    for (double kappa : cfg_.attacks.cw_kappas) {
      auto r = robustness_sweep(models, AttackKind::cw, cfg_.attacks, test, box, kappa);
      sweep.insert(sweep.end(), r.begin(), r.end());
    }
    std::ostringstream os;
    write_sweep_csv(os, sweep);
    write_atomic(dir / "attack_sweep.csv", os.str());
    std::vector<MetricRow> rows;
    for (const auto& s : sweep) {
      std::ostringstream ds;
      ds << "test-" << s.attack << '@' << s.magnitude;
      rows.push_back({s.model, ds.str(), "auc", s.auc});
    }
    write_atomic(dir / "attack_metrics.json",
                 metrics_json(rows, {{"seed", seed}, {"stage", "attack"}}).dump(2) + "\n");
  }

  void ablate(std::uint64_t seed) {
    const fs::path dir = seed_dir(seed);
    const auto train = read_set(dir / "train.csv", "gen-data");
    const auto test = read_set(dir / "test.csv", "gen-data");
    const auto far = read_set(dir / "far_ood.csv", "gen-data");
    const Classifier base = load_classifier(dir / "classifier", "train-classifier");
    std::vector<MetricRow> rows;
    for (const auto& arm : ablation_arms()) {
      PCEConfig pcfg = cfg_.pce;
      pcfg.*arm.weight = 0.0;
      const std::string tag = "pce-" + arm.tag;
      train_pce_stage(seed, pcfg, tag);
      const auto archive = load_archive(dir / tag);
      const PCE pce = load_pce(dir / tag, base, "ablate");
      const std::string model = "pce-" + arm.tag;
      append_pce_diagnostics(rows, model, pce, archive, train, test, Rng(seed));
      const auto d_test = pce.density(test.features), d_far = pce.density(far.features);
      rows.push_back({model, "far_ood", "density_auc",
                      ood_eval(d_test, d_far, ScoreDirection::high_means_id, cfg_.target_tpr).auc});
      rows.push_back({model, "test", "abstention_rate", abstention(d_test)});
      rows.push_back({model, "far_ood", "abstention_rate", abstention(d_far)});
    }
    write_atomic(dir / "ablation_metrics.json",
                 metrics_json(rows, {{"seed", seed}, {"stage", "ablate"}}).dump(2) + "\n");
  }

  /// Collects every metrics file into summary.json, with per-metric medians
  /// over replicates for the evaluate rows.
  void report() {
    json summary{{"schema_version", kMetricsSchemaVersion}, {"config", to_json(cfg_)}};
    json results = json::array();
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> per_key;
    const auto seeds = cfg_.replicate_seeds();
    for (std::uint64_t s : seeds) {
      for (const std::string file : {"metrics.json", "attack_metrics.json", "ablation_metrics.json"}) {
        const fs::path p = seed_dir(s) / file;
        if (!fs::exists(p)) {
          if (file == "metrics.json") throw DependencyError("report needs " + p.string() + "; run 'evaluate' first");
          continue;
        }
        const json j = json::parse(read_file(p));
        for (const auto& r : metrics_rows(j)) {
          results.push_back({{"seed", s}, {"model", r.model}, {"dataset", r.dataset}, {"metric", r.metric},
                             {"value", r.value}});
          if (file == "metrics.json") per_key[{r.model, r.dataset, r.metric}].push_back(r.value);
        }
      }
    }
    json medians = json::array();
    for (auto& [key, values] : per_key) {
      if (values.size() != seeds.size()) continue;
      std::sort(values.begin(), values.end());
      const std::size_t n = values.size();
      const double med = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
      medians.push_back({{"model", std::get<0>(key)}, {"dataset", std::get<1>(key)},
                         {"metric", std::get<2>(key)}, {"value", med}});
    }
    summary["seeds"] = seeds;
    summary["results"] = results;
    summary["medians"] = medians;
    write_atomic(out_ / "summary.json", summary.dump(2) + "\n");
  }

  // -- artifact helpers ------------------------------------------------------

  Classifier load_classifier(const fs::path& base, const std::string& producer) const {
    const auto a = load_archive_or_throw(base, producer);
    if (a.model_kind != "classifier") throw ValidationError(base.string() + " is not a classifier archive");
    ClassifierConfig cc = cfg_.classifier;
    cc.input_dim = a.meta.at("input_dim").get<std::size_t>();
    cc.num_classes = a.meta.at("num_classes").get<std::size_t>();
    Rng dummy(0);
    Classifier f(cc, dummy);
    a.restore(f.state());
    f.set_frozen(true);
    return f;
  }

  PCE load_pce(const fs::path& base, const Classifier& f, const std::string& producer) const {
    const auto a = load_archive_or_throw(base, producer);
    if (a.model_kind != "pce") throw ValidationError(base.string() + " is not a PCE archive");
    PCEConfig pc = cfg_.pce;
    pc.latent_dim = a.meta.at("config").at("latent_dim").get<std::size_t>();
    pc.fusion = a.meta.at("config").at("fusion").get<bool>();
    Rng dummy(0);
    PCE pce(f, pc, dummy);
    a.restore(pce.state());
    return pce;
  }

 private:
  template <class F>
  void for_each_seed(F fn) {
    for (std::uint64_t s : cfg_.replicate_seeds()) fn(s);
  }

  static std::string stage_label(Stage st) {
    for (const auto& [name, s] : stage_names())
      if (s == st) return name;
    return "?";
  }

  static std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
  }

  void say(const std::string& msg) const {
    if (log_) *log_ << "[ace-lab] " << msg << std::endl;
  }

  static double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }

  double abstention(const std::vector<double>& density) const {
    std::size_t n = 0;
    for (double d : density) n += d < cfg_.threshold;
    return static_cast<double>(n) / static_cast<double>(density.size());
  }

  static void require(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) {
      throw DependencyError("missing artifact " + p.string() + "; run stage '" + producer + "' first");
    }
  }

  static WeightArchive load_archive_or_throw(const fs::path& base, const std::string& producer) {
    if (!archive_exists(base)) {
      throw DependencyError("missing weight archive " + base.string() + ".json; run stage '" + producer +
                            "' first");
    }
    return load_archive(base);
  }

  static LabeledSet read_set(const fs::path& p, const std::string& producer) {
    require(p, producer);
    std::ifstream is(p);
    return read_labeled_csv(is, p.stem().string());
  }

  static void write_set(const fs::path& p, const LabeledSet& s) {
    std::ostringstream os;
    write_labeled_csv(os, s);
    write_atomic(p, os.str());
  }

  static void write_scores(const fs::path& p, const std::vector<double>& scores) {
    std::ostringstream os;
    os << "sample_id,score\n" << std::setprecision(17);
    for (std::size_t i = 0; i < scores.size(); ++i) os << i << ',' << scores[i] << '\n';
    write_atomic(p, os.str());
  }

  static json pce_json(const PCEConfig& p) {
    return {{"lambda_adv", p.lambda_adv}, {"lambda_f", p.lambda_f},   {"lambda_rec", p.lambda_rec},
            {"latent_dim", p.latent_dim}, {"fusion", p.fusion},       {"epochs", p.epochs},
            {"lr", p.adam.lr},            {"subset_fraction", p.subset_fraction}};
  }

  static void save_classifier(const fs::path& base, const Classifier& f, const TrainReport& r) {
    json meta{{"input_dim", f.input_dim()},
              {"num_classes", f.num_classes()},
              {"hidden", f.hidden()},
              {"dropout", f.dropout_rate()},
              {"selected_epoch", r.selected_epoch},
              {"train_loss", r.train_loss},
              {"test_accuracy", r.test_accuracy},
              {"test_ece", r.test_ece}};
    save_archive(WeightArchive::from_state("classifier", f.state(), meta), base);
  }

  void append_pce_diagnostics(std::vector<MetricRow>& rows, const std::string& model, const PCE& pce,
                              const WeightArchive& archive, const LabeledSet& train, const LabeledSet& test,
                              const Rng& root) const {
    const double first = archive.meta.at("kl_epoch_first").get<double>();
    const double last = archive.meta.at("kl_epoch_last").get<double>();
    rows.push_back({model, "train", "kl_epoch_first", first});
    rows.push_back({model, "train", "kl_epoch_last", last});
    rows.push_back({model, "train", "kl_ratio", first > 0.0 ? last / first : 0.0});
    rows.push_back({model, "test", "self_reconstruction_l1", self_reconstruction_l1(pce, test.features)});
    Rng kl_rng = root.child("diag-kl");
    rows.push_back({model, "test", "consistency_kl", consistency_kl(pce, test.features, kl_rng)});
    Rng d_rng = root.child("diag-d");
    rows.push_back({model, "train", "discriminator_accuracy", discriminator_accuracy(pce, train.features, d_rng)});
  }

  ExperimentConfig cfg_;
  fs::path out_;
  std::ostream* log_;
};

}  // namespace acelab
