// Acceptance suite: one PASS/FAIL line per criterion. Criteria 3-11 share two
// runs of the full pipeline on the packaged default config.
//
// usage: acceptance [config.json] [work-dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "acelab/experiment.hpp"
#include "oracles.hpp"

using namespace acelab;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void report(int id, const std::string& name, const Verdict& v, int& failures) {
  std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << id << ". " << name << ": " << v.detail << std::endl;
  if (!v.pass) ++failures;
}

// -- 1 ---------------------------------------------------------------------

// Zero-initialised biases can park a ReLU exactly on its kink (a dead decoder
// emits exactly 0), where finite differences are one-sided. Noise on every
// parameter moves the check to a generic point.
void jitter(const std::vector<Tensor>& params, Rng& rng) {
  for (auto p : params)
    for (double& v : p.mutable_values()) v += 0.1 * rng.normal();
}

// A ReLU kink within one step of a parameter spoils a central difference;
// a real gradient error survives the smaller step, a kink crossing does not.
double checked_error(const std::function<Tensor()>& loss, const std::vector<Tensor>& params) {
  const double err = oracle::gradient_check(loss, params, 1e-5);
  return err < 1e-4 ? err : oracle::gradient_check(loss, params, 1e-6);
}

Verdict gradient_fidelity() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_where;
  auto track = [&](double err, const std::string& what, int net) {
    if (err > worst) {
      worst = err;
      worst_where = what + " (network " + std::to_string(net) + ")";
    }
  };
  for (int net = 0; net < 50; ++net) {
    Rng rng(1000 + static_cast<std::uint64_t>(net));
    ClassifierConfig cc;
    cc.input_dim = 2 + rng.below(2);
    cc.num_classes = 2 + rng.below(2);
    cc.hidden = 3 + rng.below(5);
    cc.dropout = 0.3 * rng.uniform();
    Classifier f(cc, rng);
    jitter(f.parameters(), rng);
    const std::size_t n = 3 + rng.below(4), d = cc.input_dim, k = cc.num_classes;
    f.forward(Tensor(Shape{8, d}, gaussian(rng, 8 * d)), Mode::train, &rng);  // running stats
    const Tensor x(Shape{n, d}, gaussian(rng, n * d));
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.below(k);
    std::vector<double> soft;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(k);
      double s = 0.0;
      for (auto& r : row) s += (r = 0.05 + rng.uniform());
      for (double r : row) soft.push_back(r / s);
    }
    const Tensor target(Shape{n, k}, soft);
    const auto f_params = f.parameters();
    track(checked_error([&] { return cross_entropy(f.forward(x).logits, y); }, f_params), "CE", net);
    track(checked_error([&] { return soft_cross_entropy(softmax(f.forward(x).logits), target); },
                                 f_params),
          "soft-CE", net);

    f.set_frozen(true);
    PCEConfig pc;
    pc.latent_dim = 2 + rng.below(5);
    pc.fusion = rng.below(2) == 1;
    PCE pce(f, pc, rng);
    std::vector<Condition> cs;
    const auto pred = f.predict(x);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t kc = rng.below(k - 1);
      if (kc >= pred[i]) ++kc;
      cs.push_back(sample_condition(k, pred[i], kc, rng));
    }
    const Tensor c = stack_conditions(cs);
    const Tensor probe(Shape{n, d}, gaussian(rng, n * d));
    const double a = rng.uniform();
    const auto g_params = trainable(pce.generator_state());
    const auto d_params = trainable(pce.discriminator_state());
    jitter(g_params, rng);
    jitter(d_params, rng);
    const Tensor fake = pce.generate(x, c).detach();
    track(checked_error([&] { return discriminator_loss(pce.discriminate(x), pce.discriminate(fake)); },
                                 d_params),
          "adversarial (discriminator side)", net);
    track(checked_error([&] { return generator_adversarial_loss(pce.discriminate(pce.generate(x, c))); },
                                 g_params),
          "adversarial (generator side)", net);
    track(checked_error(
              [&] {
                const Tensor w = pce.encode(x);
                return path_length_penalty(pce.decode(w, c), w, probe, a).penalty;
              },
              g_params),
          "path length", net);
    track(checked_error(
              [&] { return classifier_consistency(softmax(pce.classifier().logits(pce.generate(x, c))), c); },
              g_params),
          "consistency KL", net);
    track(checked_error([&] { return reconstruction_loss(pce, x, c); }, g_params), "reconstruction",
          net);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          "max relative error " + std::to_string(worst) + " at " + worst_where + ", " + fmt(secs, 1) + " s"};
}

// -- 2 ---------------------------------------------------------------------

Verdict metric_oracles() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst_auc = 0.0;
  std::size_t tnr_mismatch = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 2 + rng.below(49);
    const bool discrete = rng.below(2) == 0;  // half the instances are tie-heavy
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = discrete ? static_cast<double>(rng.below(5)) : rng.normal();
      labels[i] = static_cast<int>(rng.below(2));
    }
    labels[0] = 1;
    labels[1] = 0;
    ScoredBinarySet s{scores, labels};
    worst_auc = std::max(worst_auc, std::fabs(auc_roc(s) - oracle::auc_pairs(scores, labels)));
    const double target = 0.5 + 0.5 * rng.uniform();
    if (tnr_at_tpr(s, target) != oracle::tnr_sweep(scores, labels, target)) ++tnr_mismatch;
  }
  const double secs = seconds_since(t0);
  return {worst_auc <= 1e-12 && tnr_mismatch == 0 && secs < 30.0,
          "max AUC deviation " + std::to_string(worst_auc) + ", TNR mismatches " + std::to_string(tnr_mismatch) +
              " of 1000, " + fmt(secs, 2) + " s"};
}

// -- pipeline-backed criteria ------------------------------------------------

struct Run {
  std::vector<MetricRow> eval;     // reference seed
  std::vector<MetricRow> attack;   // reference seed
  std::vector<MetricRow> ablation; // reference seed
  json summary;
  std::map<std::string, double> stage_seconds;
  double total_seconds = 0.0;
};

// Both runs write to the same directory (the summary embeds it); the result
// is then moved to `keep`.
Run run_pipeline(ExperimentConfig cfg, const fs::path& out, const fs::path& keep) {
  fs::remove_all(out);
  fs::remove_all(keep);
  cfg.output_dir = out.string();
  Experiment exp(cfg);
  Run r;
  const auto t0 = Clock::now();
  for (const auto& [name, st] : stage_names()) {
    const auto ts = Clock::now();
    exp.run(st);
    r.stage_seconds[name] = seconds_since(ts);
  }
  r.total_seconds = seconds_since(t0);
  const fs::path ref = exp.seed_dir(cfg.seed);
  r.eval = metrics_rows(json::parse(read_file(ref / "metrics.json")));
  r.attack = metrics_rows(json::parse(read_file(ref / "attack_metrics.json")));
  r.ablation = metrics_rows(json::parse(read_file(ref / "ablation_metrics.json")));
  r.summary = json::parse(read_file(out / "summary.json"));
  fs::rename(out, keep);
  return r;
}

Verdict baseline_quality(const Run& r, const ExperimentConfig& cfg, const fs::path& dir) {
  // retrain the reference classifier alone for the runtime figure
  const auto t0 = Clock::now();
  std::ifstream tr(dir / "train.csv"), te(dir / "test.csv");
  const auto train = read_labeled_csv(tr), test = read_labeled_csv(te, "test");
  Rng rng = Rng(cfg.seed).child("classifier");
  const auto t = train_classifier(train, &test, cfg.classifier, rng);
  const double secs = seconds_since(t0);
  const double acc = metric_value(r.eval, "baseline", "test", "accuracy");
  const double again = accuracy(t.model.predict_proba(test.features), test.labels);
  return {acc >= 0.97 && again == acc && secs < 60.0,
          "test accuracy " + fmt(acc) + " (threshold 0.97), training " + fmt(secs, 1) + " s"};
}

struct PceChecks {
  double l1 = 0.0, kl_ratio = 0.0, d_acc = 0.0;
  bool i() const { return l1 <= 0.1; }
  bool ii() const { return kl_ratio <= 0.25; }
  bool iii() const { return d_acc >= 0.4 && d_acc <= 0.9; }
};

PceChecks pce_checks(const std::vector<MetricRow>& rows, const std::string& model) {
  return {metric_value(rows, model, "test", "self_reconstruction_l1"), metric_value(rows, model, "train", "kl_ratio"),
          metric_value(rows, model, "train", "discriminator_accuracy")};
}

Verdict pce_consistency(const Run& r) {
  const auto c = pce_checks(r.eval, "pce");
  const double secs = r.stage_seconds.at("train-pce");
  std::string detail = std::string("(i) L1 ") + fmt(c.l1) + (c.i() ? " ok" : " > 0.1") + "; (ii) final/first KL " +
                       fmt(c.kl_ratio) + (c.ii() ? " ok" : " > 0.25") + "; (iii) D accuracy " + fmt(c.d_acc) +
                       (c.iii() ? " ok" : " outside [0.4, 0.9]") + "; training " + fmt(secs, 1) +
                       " s for all replicates";
  return {c.i() && c.ii() && c.iii() && secs < 300.0, detail};
}

Verdict id_accuracy_kept(const Run& r) {
  const double base = metric_value(r.eval, "baseline", "test", "accuracy");
  const double ace = metric_value(r.eval, "ace", "test", "accuracy");
  return {std::fabs(ace - base) <= 0.02, "baseline " + fmt(base) + ", fine-tuned " + fmt(ace)};
}

Verdict aid_shift(const Run& r) {
  const double pe_b = metric_value(r.eval, "baseline", "aid", "mean_pe");
  const double pe_a = metric_value(r.eval, "ace", "aid", "mean_pe");
  const double auc_b = metric_value(r.eval, "baseline", "aid", "auc");
  const double auc_a = metric_value(r.eval, "ace", "aid", "auc");
  return {pe_a > pe_b && auc_a >= auc_b - 0.02,
          "AiD mean PE " + fmt(pe_b) + " -> " + fmt(pe_a) + "; AiD AUC " + fmt(auc_b) + " -> " + fmt(auc_a) +
              " (floor " + fmt(auc_b - 0.02) + ")"};
}

Verdict near_ood_median(const Run& r) {
  double base = NAN, ace = NAN;
  for (const auto& m : r.summary.at("medians")) {
    if (m.at("dataset") != "near_ood" || m.at("metric") != "auc") continue;
    if (m.at("model") == "baseline") base = m.at("value").get<double>();
    if (m.at("model") == "ace") ace = m.at("value").get<double>();
  }
  const auto seeds = r.summary.at("seeds").size();
  return {ace >= base, "median near-OOD AUC over " + std::to_string(seeds) + " seeds: baseline " + fmt(base) +
                           ", fine-tuned " + fmt(ace)};
}

struct DensityChecks {
  double auc = 0.0, far_abstain = 0.0, id_abstain = 0.0;
  bool pass() const { return auc >= 0.95 && far_abstain >= 0.90 && id_abstain <= 0.10; }
};

Verdict far_ood_density(const Run& r) {
  const DensityChecks c{metric_value(r.eval, "pce", "far_ood", "density_auc"),
                        metric_value(r.eval, "selective", "far_ood", "abstention_rate"),
                        metric_value(r.eval, "selective", "test", "abstention_rate")};
  return {c.pass(), "density AUC " + fmt(c.auc) + " (>= 0.95), far-OOD abstention " + fmt(c.far_abstain) +
                        " (>= 0.90), iD abstention " + fmt(c.id_abstain) + " (<= 0.10)"};
}

Verdict fgsm_robustness(const Run& r, const std::vector<double>& eps) {
  std::size_t below = 0, above = 0;
  double worst_gap = INFINITY;
  for (double e : eps) {
    std::ostringstream ds;
    ds << "test-fgsm@" << e;
    const double b = metric_value(r.attack, "baseline", ds.str(), "auc");
    const double a = metric_value(r.attack, "ace", ds.str(), "auc");
    worst_gap = std::min(worst_gap, a - b);
    below += a < b - 0.02;
    above += a > b;
  }
  // affine closed form for DeepFool
  const Tensor W(Shape{2, 2}, {0.3, -1.1, 0.7, 0.4});
  const Tensor B(Shape{1, 2}, {0.2, -0.5});
  const LogitModel affine{[W, B](const Tensor& x) { return matmul(x, W) + B; }, 2};
  Rng rng(9);
  const Tensor x(Shape{20, 2}, gaussian(rng, 40));
  const auto pred = affine.predict(x);
  std::vector<int> y(pred.begin(), pred.end());
  const auto df = deepfool_detailed(affine, x, y, 1, 0.02);
  double df_err = 0.0;
  const double w0 = W.at(0, 1) - W.at(0, 0), w1 = W.at(1, 1) - W.at(1, 0), b = B[1] - B[0];
  for (std::size_t i = 0; i < 20; ++i) {
    const double sign = y[i] == 0 ? 1.0 : -1.0;  // direction of z_other - z_true
    const double g = sign * (w0 * x.at(i, 0) + w1 * x.at(i, 1) + b);
    const double scale = -g / (w0 * w0 + w1 * w1);
    df_err = std::max(df_err, std::fabs(df.perturbation.at(i, 0) - scale * sign * w0));
    df_err = std::max(df_err, std::fabs(df.perturbation.at(i, 1) - scale * sign * w1));
  }
  return {below == 0 && above >= 1 && df_err <= 1e-8,
          "fine-tuned minus baseline AUC, worst " + fmt(worst_gap) + " (floor -0.02), strictly higher at " +
              std::to_string(above) + " of " + std::to_string(eps.size()) + " eps; DeepFool affine error " +
              std::to_string(df_err)};
}

Verdict ablation(const Run& r) {
  std::string detail;
  bool all_ran = true, adv_fails = false, rec_fails = false;
  for (const auto& arm : ablation_arms()) {
    const std::string model = "pce-" + arm.tag;
    PceChecks c;
    DensityChecks dc;
    try {
      c = pce_checks(r.ablation, model);
      dc = {metric_value(r.ablation, model, "far_ood", "density_auc"),
            metric_value(r.ablation, model, "far_ood", "abstention_rate"),
            metric_value(r.ablation, model, "test", "abstention_rate")};
    } catch (const ContractError&) {
      all_ran = false;
      detail += arm.tag + " missing; ";
      continue;
    }
    const bool fails = !c.i() || !c.ii() || !dc.pass();
    if (arm.tag == "no-adv") adv_fails = fails;
    if (arm.tag == "no-rec") rec_fails = fails;
    detail += arm.tag + ": L1 " + fmt(c.l1, 3) + ", KL ratio " + fmt(c.kl_ratio, 3) + ", density AUC " +
              fmt(dc.auc, 3) + (fails ? " (degraded)" : " (meets 4i/4ii/8)") + "; ";
  }
  return {all_ran && adv_fails && rec_fails, detail};
}

bool same_bytes(const fs::path& a, const fs::path& b) { return read_file(a) == read_file(b); }

Verdict determinism(const Run& first, const fs::path& out1, const fs::path& out2, double budget_seconds) {
  std::size_t compared = 0, differing = 0;
  std::string first_diff;
  for (const auto& entry : fs::recursive_directory_iterator(out1)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext != ".json" && ext != ".bin") continue;
    const fs::path other = out2 / fs::relative(entry.path(), out1);
    ++compared;
    if (!fs::exists(other) || !same_bytes(entry.path(), other)) {
      if (first_diff.empty()) first_diff = fs::relative(entry.path(), out1).string();
      ++differing;
    }
  }
  // archive round trip: load, save elsewhere, compare bytes
  std::size_t archives = 0, round_trip_bad = 0;
  const fs::path tmp = out2 / "round-trip";
  for (const auto& entry : fs::recursive_directory_iterator(out1)) {
    if (entry.path().extension() != ".bin") continue;
    fs::path base = entry.path();
    base.replace_extension();
    const auto a = load_archive(base);
    const fs::path copy = tmp / base.filename();
    save_archive(a, copy);
    fs::path copy_bin = copy;
    copy_bin += ".bin";
    ++archives;
    if (!same_bytes(entry.path(), copy_bin)) ++round_trip_bad;
  }
  const bool ok = differing == 0 && compared > 0 && round_trip_bad == 0 && first.total_seconds <= budget_seconds;
  return {ok, std::to_string(compared) + " artifacts compared across two runs, " + std::to_string(differing) +
                  " differ" + (first_diff.empty() ? "" : " (first: " + first_diff + ")") + "; " +
                  std::to_string(archives) + " archives round-tripped, " + std::to_string(round_trip_bad) +
                  " mismatched; full pipeline " + fmt(first.total_seconds, 1) + " s (budget " +
                  fmt(budget_seconds, 0) + " s)"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config_path = argc > 1 ? fs::path(argv[1]) : fs::path("configs/two-moons-default.json");
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::path("acceptance-work");
  int failures = 0;
  try {
    report(1, "gradient fidelity", gradient_fidelity(), failures);
    report(2, "metric oracles", metric_oracles(), failures);

    const ExperimentConfig cfg = load_config(config_path);
    std::clog << "[acceptance] running the full pipeline twice into " << work << std::endl;
    const Run run = run_pipeline(cfg, work / "run", work / "run-a");
    const Run again = run_pipeline(cfg, work / "run", work / "run-b");
    (void)again;
    const fs::path ref_dir = work / "run-a" / ("seed-" + std::to_string(cfg.seed));

    report(3, "baseline quality", baseline_quality(run, cfg, ref_dir), failures);
    report(4, "explainer consistency", pce_consistency(run), failures);
    report(5, "in-distribution accuracy kept", id_accuracy_kept(run), failures);
    report(6, "ambiguous samples gain entropy", aid_shift(run), failures);
    report(7, "near-OOD detection", near_ood_median(run), failures);
    report(8, "far-OOD density and abstention", far_ood_density(run), failures);
    report(9, "adversarial robustness", fgsm_robustness(run, cfg.attacks.fgsm_eps), failures);
    report(10, "loss-term ablation", ablation(run), failures);
    report(11, "determinism and persistence", determinism(run, work / "run-a", work / "run-b", 600.0), failures);
  } catch (const std::exception& e) {
    std::cout << "[FAIL] acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
