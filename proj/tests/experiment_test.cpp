#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "acelab/experiment.hpp"

using namespace acelab;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("acelab-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.replicates = 1;
  c.data.n_samples = 200;
  c.data.near_ood_samples = 40;
  c.data.far_ood_samples = 40;
  c.classifier.hidden = 8;
  c.classifier.epochs = 6;
  c.baselines.ensemble_size = 2;
  c.baselines.mc_samples = 3;
  c.baselines.aid_fraction = 0.1;
  c.pce.epochs = 2;
  c.pce.latent_dim = 6;
  c.ace.finetune.epochs = 2;
  c.ace.traversal_points = 10;
  c.attacks.fgsm_eps = {0.0, 0.1};
  c.attacks.cw_iters = {0, 5};
  c.attacks.deepfool_iters = {0, 2};
  c.output_dir = out.string();
  return c;
}

std::size_t csv_rows(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) ++n;
  return n == 0 ? 0 : n - 1;
}

std::vector<double> csv_column(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  std::vector<double> v;
  while (std::getline(is, line)) v.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Weight archives

TEST(Archive, RoundTripIsBitwise) {
  const fs::path dir = scratch("archive-rt");
  WeightArchive a;
  a.model_kind = "probe";
  a.meta = {{"note", "x"}};
  a.tensors.push_back({"w", Shape{2, 3},
                       {0.1, -0.0, std::numeric_limits<double>::denorm_min(), 1e308, -3.5,
                        std::nextafter(1.0, 2.0)}});
  a.tensors.push_back({"b", Shape{1}, {42.0}});
  save_archive(a, dir / "m");
  const auto back = load_archive(dir / "m");
  EXPECT_EQ(back.model_kind, "probe");
  EXPECT_EQ(back.meta, a.meta);
  ASSERT_EQ(back.tensors.size(), 2u);
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_EQ(back.tensors[t].shape, a.tensors[t].shape);
    ASSERT_EQ(back.tensors[t].values.size(), a.tensors[t].values.size());
    for (std::size_t i = 0; i < a.tensors[t].values.size(); ++i)
      EXPECT_EQ(std::memcmp(&back.tensors[t].values[i], &a.tensors[t].values[i], 8), 0);
  }
  EXPECT_EQ(fs::file_size(dir / "m.bin"), 7u * 8u);
}

TEST(Archive, ClassifierRestoresExactly) {
  const fs::path dir = scratch("archive-clf");
  Rng rng(3);
  ClassifierConfig cc;
  cc.hidden = 5;
  Classifier f(cc, rng);
  save_archive(WeightArchive::from_state("classifier", f.state()), dir / "f");
  Rng other(99);
  Classifier g(cc, other);
  load_archive(dir / "f").restore(g.state());
  const Tensor x(Shape{4, 2}, gaussian(rng, 8));
  const auto pf = f.predict_proba(x), pg = g.predict_proba(x);
  for (std::size_t i = 0; i < pf.size(); ++i) EXPECT_EQ(pf[i], pg[i]);
}

TEST(Archive, ShapeOrCountMismatchIsRejected) {
  const fs::path dir = scratch("archive-mismatch");
  Rng rng(3);
  ClassifierConfig small;
  small.hidden = 5;
  ClassifierConfig wide = small;
  wide.hidden = 6;
  save_archive(WeightArchive::from_state("classifier", Classifier(small, rng).state()), dir / "f");
  EXPECT_THROW(load_archive(dir / "f").restore(Classifier(wide, rng).state()), ValidationError);
  auto a = load_archive(dir / "f");
  a.tensors.pop_back();
  EXPECT_THROW(a.restore(Classifier(small, rng).state()), ValidationError);
}

TEST(Archive, CorruptManifestsAreRejected) {
  const fs::path dir = scratch("archive-corrupt");
  WeightArchive a;
  a.model_kind = "probe";
  a.tensors.push_back({"a", Shape{2}, {1.0, 2.0}});
  a.tensors.push_back({"b", Shape{2}, {3.0, 4.0}});
  save_archive(a, dir / "m");
  const json good = json::parse(read_file(dir / "m.json"));
  auto rewrite = [&](const json& j) { write_atomic(dir / "m.json", j.dump()); };

  json overlap = good;
  overlap["tensors"][1]["offset"] = 8;
  rewrite(overlap);
  EXPECT_THROW(load_archive(dir / "m"), ValidationError);

  json outside = good;
  outside["tensors"][1]["offset"] = 24;
  rewrite(outside);
  EXPECT_THROW(load_archive(dir / "m"), ValidationError);

  json version = good;
  version["format_version"] = 2;
  rewrite(version);
  EXPECT_THROW(load_archive(dir / "m"), ValidationError);

  json dtype = good;
  dtype["tensors"][0]["dtype"] = "f32";
  rewrite(dtype);
  EXPECT_THROW(load_archive(dir / "m"), ValidationError);

  rewrite(good);
  write_atomic(dir / "m.bin", std::string(24, '\0'));
  EXPECT_THROW(load_archive(dir / "m"), ValidationError);

  write_atomic(dir / "m.json", "{not json");
  EXPECT_THROW(load_archive(dir / "m"), ValidationError);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const json j = to_json(c);
  EXPECT_EQ(to_json(config_from_json(j)), j);
  EXPECT_EQ(j.at("pce").at("lambda_rec").get<double>(), 100.0);
  EXPECT_EQ(j.at("ace").at("augmentations").get<std::size_t>(), 4u);
}

TEST(Config, PackagedDefaultMatchesBuiltIn) {
  const auto c = load_config(fs::path(ACELAB_SOURCE_DIR) / "configs" / "two-moons-default.json");
  json expected = to_json(ExperimentConfig{});
  json got = to_json(c);
  expected.erase("output_dir");
  got.erase("output_dir");
  EXPECT_EQ(got, expected);
}

TEST(Config, PartialOverridesKeepDefaults) {
  const auto c = config_from_json(json{{"seed", 11}, {"pce", {{"epochs", 3}}}});
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.pce.epochs, 3u);
  EXPECT_EQ(c.pce.lambda_adv, 10.0);
  EXPECT_EQ(c.replicate_seeds(), (std::vector<std::uint64_t>{11, 12, 13}));
}

TEST(Config, UnknownKeyNamesThePath) {
  try {
    config_from_json(json{{"pce", {{"lambda_recon", 1.0}}}});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("pce.lambda_recon"), std::string::npos) << e.what();
  }
}

TEST(Config, WrongKindAndRangeAreRejected) {
  EXPECT_THROW(config_from_json(json{{"selective", {{"threshold", "high"}}}}), ValidationError);
  EXPECT_THROW(config_from_json(json{{"selective", {{"threshold", 1.0}}}}), ValidationError);
  EXPECT_THROW(config_from_json(json{{"data", {{"n_samples", 201}}}}), ValidationError);
  EXPECT_THROW(config_from_json(json{{"pce", {{"lambda_f", -1.0}}}}), ValidationError);
  EXPECT_THROW(config_from_json(json{{"attacks", {{"fgsm_eps", {0.1, "x"}}}}}), ValidationError);
  EXPECT_THROW(config_from_json(json{{"seed", -1}}), ValidationError);
  EXPECT_THROW(config_from_json(json{{"pce", {{"epochs", 2.5}}}}), ValidationError);
}

TEST(Config, MissingFileIsAnIoError) { EXPECT_THROW(load_config("/nonexistent/cfg.json"), IoError); }

// ---------------------------------------------------------------------------
// Metrics records

TEST(Metrics, JsonSchemaRoundTrip) {
  const std::vector<MetricRow> rows{{"baseline", "test", "accuracy", 0.5}, {"ace", "aid", "auc", 0.75}};
  const json j = metrics_json(rows, {{"seed", 3}});
  EXPECT_EQ(j.at("schema_version").get<int>(), 1);
  EXPECT_EQ(j.at("seed").get<int>(), 3);
  const auto back = metrics_rows(j);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(metric_value(back, "ace", "aid", "auc"), 0.75);
  EXPECT_THROW(metric_value(back, "ace", "aid", "tnr"), ContractError);
}

// ---------------------------------------------------------------------------
// Pipeline stages

TEST(Stages, NamesParse) {
  for (const auto& [name, st] : stage_names()) EXPECT_EQ(parse_stage(name), st);
  EXPECT_THROW(parse_stage("train"), ValidationError);
}

TEST(Stages, MissingArtifactNamesTheProducer) {
  const fs::path out = scratch("stages-missing");
  Experiment e(tiny_config(out), nullptr);
  try {
    e.run(Stage::train_classifier);
    FAIL() << "expected DependencyError";
  } catch (const DependencyError& err) {
    EXPECT_NE(std::string(err.what()).find("gen-data"), std::string::npos) << err.what();
  }
  e.run(Stage::gen_data);
  EXPECT_THROW(e.run(Stage::train_pce), DependencyError);
  EXPECT_THROW(e.run(Stage::report), DependencyError);
}

class TinyPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    out_ = new fs::path(scratch("stages-tiny"));
    Experiment e(tiny_config(*out_), nullptr);
    e.run_all();
  }
  static void TearDownTestSuite() { delete out_; }
  static fs::path seed_dir() { return *out_ / "seed-7"; }
  static fs::path* out_;
};
fs::path* TinyPipeline::out_ = nullptr;

TEST_F(TinyPipeline, WritesEveryArtifact) {
  for (const char* f : {"train.csv", "test.csv", "near_ood.csv", "far_ood.csv", "standardizer.json",
                        "classifier.json", "classifier.bin", "ensemble-1.bin", "pce.json", "pce.bin",
                        "ace.csv", "finetuned.bin", "metrics.json", "decisions.csv", "traversal.csv",
                        "attack_sweep.csv", "attack_metrics.json", "ablation_metrics.json", "pce-no-rec.bin"})
    EXPECT_TRUE(fs::exists(seed_dir() / f)) << f;
  EXPECT_TRUE(fs::exists(*out_ / "summary.json"));
}

TEST_F(TinyPipeline, SplitSizesFollowConfig) {
  EXPECT_EQ(csv_rows(seed_dir() / "train.csv"), 160u);
  EXPECT_EQ(csv_rows(seed_dir() / "test.csv"), 40u);
  EXPECT_EQ(csv_rows(seed_dir() / "near_ood.csv"), 40u);
  EXPECT_EQ(csv_rows(seed_dir() / "far_ood.csv"), 40u);
  // 4 counterfactuals per point of a 50% source subset
  EXPECT_EQ(csv_rows(seed_dir() / "ace.csv"), 4u * 80u);
  EXPECT_EQ(csv_rows(seed_dir() / "decisions.csv"), 120u);
}

TEST_F(TinyPipeline, ScoresStayInRange) {
  for (const auto& entry : fs::directory_iterator(seed_dir() / "scores")) {
    const auto v = csv_column(entry.path());
    EXPECT_FALSE(v.empty()) << entry.path();
    const bool density = entry.path().string().find("density") != std::string::npos;
    for (double s : v) {
      EXPECT_GE(s, 0.0) << entry.path();
      EXPECT_LE(s, density ? 1.0 : std::log(2.0) + 1e-12) << entry.path();
    }
  }
}

TEST_F(TinyPipeline, MetricsAreWellFormed) {
  const auto rows = metrics_rows(json::parse(read_file(seed_dir() / "metrics.json")));
  for (const char* m : {"baseline", "mc-dropout", "ensemble", "ace"}) {
    const double acc = metric_value(rows, m, "test", "accuracy");
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    EXPECT_GE(metric_value(rows, m, "far_ood", "auc"), 0.0);
  }
  for (const char* set : {"test", "near_ood", "far_ood"}) {
    const double r = metric_value(rows, "selective", set, "abstention_rate");
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
  }
  const auto summary = json::parse(read_file(*out_ / "summary.json"));
  EXPECT_EQ(summary.at("schema_version").get<int>(), 1);
  EXPECT_FALSE(summary.at("medians").empty());
}

TEST_F(TinyPipeline, RerunIsByteIdentical) {
  const fs::path again = scratch("stages-tiny-again");
  Experiment e(tiny_config(again), nullptr);
  e.run_all();
  for (const char* f : {"metrics.json", "attack_metrics.json", "ablation_metrics.json", "pce.bin",
                        "finetuned.bin", "ace.csv"})
    EXPECT_EQ(read_file(seed_dir() / f), read_file(again / "seed-7" / f)) << f;
}

TEST_F(TinyPipeline, StageRerunReusesUpstreamArtifacts) {
  const std::string before = read_file(seed_dir() / "metrics.json");
  Experiment e(tiny_config(*out_), nullptr);
  e.run(Stage::evaluate);
  EXPECT_EQ(read_file(seed_dir() / "metrics.json"), before);
}
