#pragma once

// Experiment driver: trains a model roster and runs epsilon sweeps,
// iteration sweeps, EOT campaigns and calibration reports from one JSON
// config, writing CSV tables, SVG charts and a manifest under output_dir.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bnnlab/attacks.hpp"
#include "bnnlab/calibration.hpp"
#include "bnnlab/data.hpp"
#include "bnnlab/model.hpp"
#include "bnnlab/training.hpp"
#include "json.hpp"

namespace bnnlab {

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | cifar10
  SynthSpec synth;
  std::string cifar_dir;
};

struct RosterEntry {
  std::string name;
  ModelSpec spec;
  TrainConfig train;
  nlohmann::json source;  // the entry as written, for the manifest
};

struct AttackGrid {
  std::vector<double> linf_eps;
  std::vector<double> l2_eps;
  std::vector<std::size_t> pgd_iters{10, 40};
  std::vector<std::size_t> iter_sweep;
  double iter_sweep_eps = 0.03;
  std::size_t grad_samples = 10;
  bool random_start = false;
  bool freeze_draws = false;
  EotConfig eot;
  std::size_t eot_iters = 40;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<RosterEntry> roster;
  AttackGrid attacks;
  std::size_t eval_samples = 10;
  std::size_t calibration_bins = 10;
  std::size_t eval_limit = 0;  // 0 evaluates the full test split
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;
  nlohmann::json source;
};

// Rejects unknown keys, duplicate roster names and unsorted or negative
// epsilon grids.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);
// The six-model toy roster over the l-inf 0..0.07 and l2 0..4 grids.
nlohmann::json default_experiment_json();

struct ResultRow {
  std::string model;
  std::string attack;  // none | fgsm | pgd
  std::string norm;    // linf | l2 | none
  double eps = 0.0;
  std::size_t iterations = 0;
  double alpha = 0.0;
  bool random_start = false;
  std::size_t grad_samples = 0;
  bool eot = false;
  std::size_t ensemble = 0;
  double rotation_deg = 0.0;
  double translation_px = 0.0;
  std::size_t eval_samples = 0;
  double accuracy = 0.0;
  double seconds = 0.0;
  std::uint64_t seed = 0;
};

struct ResultsTable {
  std::vector<ResultRow> rows;

  std::string to_csv(bool with_time = true) const;
  static ResultsTable from_csv(const std::string& csv);
};

struct RunOutcome {
  std::string verb;
  bool complete = true;
  std::vector<std::string> failures;
  std::vector<std::string> files;  // relative to output_dir
  ResultsTable table;
  std::vector<std::pair<std::string, CalibrationReport>> calibration;
};

std::uint64_t tuple_seed(std::uint64_t master, const std::string& tuple);

DatasetSplit load_experiment_data(const ExperimentConfig& cfg);
std::string checkpoint_path(const ExperimentConfig& cfg, const std::string& model);

RunOutcome run_training_suite(const ExperimentConfig& cfg);
RunOutcome run_epsilon_sweep(const ExperimentConfig& cfg);
RunOutcome run_iteration_sweep(const ExperimentConfig& cfg);
RunOutcome run_eot_campaign(const ExperimentConfig& cfg);
RunOutcome run_calibration_report(const ExperimentConfig& cfg);
// Aggregates whatever tables exist into summary.csv and summary.md.
RunOutcome run_report(const ExperimentConfig& cfg);

// Line chart of one series per column against the first column.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::vector<double>& xs,
                           const std::vector<std::pair<std::string, std::vector<double>>>& series);

}  // namespace bnnlab
