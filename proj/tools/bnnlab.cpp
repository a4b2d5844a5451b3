#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "bnnlab/error.hpp"
#include "bnnlab/harness.hpp"

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", c.seed, "master seed (overrides seed)");
}

bnnlab::ExperimentConfig resolve(const Common& c) {
  auto cfg = bnnlab::load_experiment_config(c.config);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.source["seed"] = *c.seed;
  }
  cfg.source["output_dir"] = cfg.output_dir;
  return cfg;
}

int finish(const bnnlab::RunOutcome& r, const bnnlab::ExperimentConfig& cfg) {
  for (const auto& f : r.failures) std::fprintf(stderr, "bnnlab %s: %s\n", r.verb.c_str(), f.c_str());
  std::printf("%s: %zu rows, %zu files under %s%s\n", r.verb.c_str(), r.table.rows.size(), r.files.size(),
              cfg.output_dir.c_str(), r.complete ? "" : " (incomplete)");
  return r.complete ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bnnlab: Bayesian and adversarially trained CNNs under white-box attack"};
  app.require_subcommand(1);

  Common common;
  struct Verb {
    const char* name;
    const char* help;
    bnnlab::RunOutcome (*run)(const bnnlab::ExperimentConfig&);
  };
  const Verb verbs[] = {
      {"train", "train the roster, save checkpoints and clean accuracies", bnnlab::run_training_suite},
      {"sweep-eps", "accuracy vs epsilon for FGSM and PGD attacks", bnnlab::run_epsilon_sweep},
      {"sweep-iters", "accuracy vs PGD iteration count at fixed epsilon", bnnlab::run_iteration_sweep},
      {"eot", "EOT FGSM and PGD over the l-inf grid", bnnlab::run_eot_campaign},
      {"calibrate", "reliability diagrams, ECE and MCE per model", bnnlab::run_calibration_report},
      {"report", "aggregate existing tables into summary.csv and summary.md", bnnlab::run_report},
  };
  std::vector<std::pair<CLI::App*, const Verb*>> commands;
  for (const auto& v : verbs) {
    CLI::App* cmd = app.add_subcommand(v.name, v.help);
    add_common(cmd, common);
    commands.emplace_back(cmd, &v);
  }
  std::string default_out;
  CLI::App* defaults = app.add_subcommand("default-config", "print the default six-model config");
  defaults->add_option("-o,--output", default_out, "write to a file instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*defaults) {
      const std::string text = bnnlab::default_experiment_json().dump(2) + "\n";
      if (default_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream(default_out) << text;
      }
      return 0;
    }
    for (const auto& [cmd, verb] : commands) {
      if (!*cmd) continue;
      const auto cfg = resolve(common);
      return finish(verb->run(cfg), cfg);
    }
  } catch (const bnnlab::Error& e) {
    std::fprintf(stderr, "bnnlab: %s\n", e.what());
    return 2;
  }
  return 0;
}
