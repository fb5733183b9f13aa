#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "cdrop/objective.hpp"

namespace cdrop {

enum class Optimiser { adam, sgd };

struct AdamState {
  Vector m, v;
  long long t = 0;
};

// Standard Adam update with bias correction, in place on a flat vector.
void adam_step(Vector& params, const Vector& grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

void sgd_step(Vector& params, const Vector& grads, double lr);

struct TrainConfig {
  int epochs = 100;
  Eigen::Index batch_size = 128;  // clamped to the dataset size
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  Optimiser optimiser = Optimiser::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int log_every = 10;
  // Length of the partial M-step between epochs (homoscedastic MAP-EM mode).
  int tau_steps_per_epoch = 10;

  void validate() const;  // throws ConfigError
};

struct TraceRow {
  long long step = 0;
  double loss = 0.0;
  std::vector<double> p;  // per-layer drop probability
  double log_tau = 0.0;
  double wall_seconds = 0.0;  // in-memory only, never exported
};

struct TrainTrace {
  std::vector<TraceRow> rows;

  // Mean of the last 5% of logged values, per layer.
  std::vector<double> converged_p() const;
  double converged_log_tau() const;

  // Columns: step, loss, p_layer_0..L, log_tau. Deterministic formatting.
  void write_csv(std::ostream& os) const;
};

// Minibatch training of all variational parameters; under homoscedastic
// MAP-EM mode, one epoch of parameter updates alternates with a partial
// M-step on log_tau, and a terminal M-step runs to convergence. Deterministic
// per (config, seed). Throws TrainingError with the step index when the loss
// stops being finite.
TrainTrace train(Mlp& model, const Matrix& X, const Targets& targets,
                 const ObjectiveConfig& obj, const TrainConfig& cfg);

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0.0;

  bool all_below(double rtol) const { return max_rel_err < rtol; }
};

// Central finite differences vs analytic gradients of the full objective,
// every parameter, under frozen noise (the rng is copied for each
// evaluation). Covers log_tau whenever the likelihood depends on it.
//
// The finite-difference oracle assumes the loss is smooth within +-h of the
// evaluation point. Relu preactivations can land arbitrarily close to their
// kink — dropout scales inputs by factors spanning many orders of magnitude —
// and a kink inside the interval invalidates the comparison without any
// gradient being wrong. Check relu_kink_margin >> h before trusting a report.
GradCheckReport grad_check(const Mlp& model, const Matrix& X,
                           const Targets& targets, const ObjectiveConfig& obj,
                           const RngStream& rng, double h = 1e-5);

// Smallest |preactivation| of any relu layer under the frozen noise stream:
// the distance to the nearest kink a parameter perturbation could cross.
double relu_kink_margin(const Mlp& model, const Matrix& X,
                        const RngStream& rng);

}  // namespace cdrop
