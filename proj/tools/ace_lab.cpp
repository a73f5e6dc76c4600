// Command-line driver for the ACE experiment pipeline.

#include <iostream>

#include "CLI11.hpp"
#include "acelab/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"ace_lab: counterfactual augmentation experiments on Two-Moons"};
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::string stage = "all";
  app.add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory (overrides the config)");
  auto* seed_opt = app.add_option("--seed", seed, "Base seed (overrides the config)");
  app.add_option("--stage", stage, "Stage to run, or 'all'")
      ->check(CLI::IsMember({"all", "gen-data", "train-classifier", "train-pce", "augment", "finetune",
                             "evaluate", "attack", "ablate", "report"}));
  CLI11_PARSE(app, argc, argv);

  try {
    acelab::ExperimentConfig cfg = acelab::load_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (*seed_opt) cfg.seed = seed;
    acelab::Experiment exp(cfg);
    acelab::write_atomic(exp.out() / "config.json", acelab::to_json(cfg).dump(2) + "\n");
    if (stage == "all") {
      exp.run_all();
    } else {
      exp.run(acelab::parse_stage(stage));
    }
  } catch (const acelab::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 2;
  } catch (const acelab::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
