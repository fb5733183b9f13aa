#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdrop/tensor.hpp"

namespace cdrop {

// Fully resolved description of one experiment run. Everything an output file
// depends on lives here, so a run can be reproduced from its manifest alone.
struct ExperimentSpec {
  std::string task;  // gradcheck | synth | regress | mnist | calibrate
  std::vector<std::uint64_t> seeds;
  std::vector<Eigen::Index> n_grid;   // dataset sizes (synth, mnist, calibrate)
  std::vector<Eigen::Index> widths;   // hidden width grid (mnist) or single width
  Eigen::Index depth = 0;             // number of hidden layers
  int epochs = 0;
  Eigen::Index batch = 0;
  double lr = 1e-3;
  int mc_samples = 200;
  double lengthscale = 1e-2;
  double temperature = 0.1;
  std::string precision_mode;  // mapem | heteroscedastic | fixed
  std::string data_path;       // csv file (regress) or idx directory (mnist)
  std::string target_column = "y";
  int csv_splits = 20;
  Eigen::Index heldout = 0;      // evaluation points for synth/calibrate
  Eigen::Index calib_points = 0; // self-consistency sample count (calibrate)
  bool svg = false;

  // Not part of the experiment's identity; excluded from the manifest.
  std::string out_dir = "runs";
};

// Fills task defaults for fields left at their zero values and validates the
// result. Throws ConfigError for an unknown task or inconsistent settings.
ExperimentSpec resolve_spec(const ExperimentSpec& spec);

void write_manifest(const ExperimentSpec& spec, const std::string& path);
ExperimentSpec load_manifest(const std::string& path);  // FormatError/ConfigError

// Resolves the spec, writes out_dir/manifest.json, dispatches on task, and
// writes the task's result tables into out_dir. Training divergence in a grid
// cell is recorded in the results and does not abort the run.
void run_experiment(const ExperimentSpec& spec);

// Individual runners (spec must already be resolved).
void run_gradcheck(const ExperimentSpec& spec);
void run_synth(const ExperimentSpec& spec);
void run_regress(const ExperimentSpec& spec);
void run_mnist(const ExperimentSpec& spec);
void run_calibrate(const ExperimentSpec& spec);

}  // namespace cdrop
