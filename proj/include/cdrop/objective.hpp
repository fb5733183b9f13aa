#pragma once

#include <cstdint>
#include <vector>

#include "cdrop/layers.hpp"
#include "cdrop/rng.hpp"
#include "cdrop/tensor.hpp"

namespace cdrop {

// How the observation noise is modelled: a single learned precision driven by
// MAP-EM, a per-point log-variance head, or a constant precision.
enum class PrecisionMode { homoscedastic_mapem, heteroscedastic_head, fixed };

enum class LossKind { euclidean, cross_entropy };

struct ObjectiveConfig {
  std::int64_t N = 0;      // training-set size entering the 1/N scaling
  double lengthscale = 1e-2;
  PrecisionMode precision_mode = PrecisionMode::homoscedastic_mapem;
  LossKind loss_kind = LossKind::euclidean;
  double tau_prior_shape = 0.1;  // Gamma(shape, rate) prior on tau
  double tau_prior_rate = 0.01;
  // Reference precision baked into the regularisation coefficients; they stay
  // fixed while MAP-EM moves the likelihood's tau.
  double reg_tau = 1.0;

  // l_eff^2/(tau N) with l_eff = l*sqrt(k_in).
  double weight_reg(Eigen::Index k_in) const;
  // 2/(tau N); the factor 2 is dropped under cross-entropy loss.
  double dropout_reg() const;

  void validate() const;  // throws ConfigError
};

// Installs the per-layer regularisation coefficients derived from cfg.
void configure_regularisation(Mlp& model, const ObjectiveConfig& cfg);

// -p log p - (1-p) log(1-p), with p clamped into [eps, 1-eps] first so the
// value is exact at interior points.
double bernoulli_entropy(double p);

// weight_reg*||W||^2/retain + dropout_reg*K*(p log p + (1-p) log(1-p)),
// K = fan-in of the dropped input. A layer with dropout disabled contributes
// the plain weight term weight_reg*||W||^2.
double layer_kl_regulariser(const ConcreteDropoutLayer& layer);

// Mean over rows of sum over columns of the Gaussian negative log-likelihood
// 0.5 exp(-log_var) (y-f)^2 + 0.5 log_var + 0.5 log(2 pi).
double gaussian_nll(const Matrix& y, const Matrix& f, const Matrix& log_var);
double gaussian_nll(const Matrix& y, const Matrix& f, double log_var);

// Mean negative log softmax probability of the true class.
double cross_entropy_nll(const Matrix& logits, const std::vector<int>& labels);

// Regression targets or class labels, depending on the loss kind.
struct Targets {
  Matrix y;
  std::vector<int> labels;
  bool classification = false;

  static Targets regression(Matrix y_) {
    Targets t;
    t.y = std::move(y_);
    return t;
  }
  static Targets classes(std::vector<int> labels_) {
    Targets t;
    t.labels = std::move(labels_);
    t.classification = true;
    return t;
  }
  Eigen::Index rows() const {
    return classification ? Eigen::Index(labels.size()) : y.rows();
  }
};

struct ElboResult {
  double loss = 0.0;  // nll + sum of layer regularisers
  double nll = 0.0;
  std::vector<double> layer_regs;
};

// Stochastic variational objective under a single noise realisation:
// mean NLL over the batch plus the per-layer KL regularisers (whose
// coefficients already carry the 1/N scaling). Deterministic given the rng
// state, the parameters and the batch.
ElboResult elbo_loss(Mlp& model, const Matrix& X, const Targets& targets,
                     const ObjectiveConfig& cfg, RngStream& rng);

// Same objective plus exact reverse-mode gradients for every variational
// parameter; grads.dlog_tau is filled in the homoscedastic/fixed modes.
ElboResult elbo_loss_grad(Mlp& model, const Matrix& X, const Targets& targets,
                          const ObjectiveConfig& cfg, RngStream& rng,
                          ModelGrads& grads);

// Gradient-ascent partial M-step on the MAP objective
//   (N/2 + a - 1) log tau - tau (sum r^2 / 2 + b),
// run for `steps` updates from log_tau. Throws ArgumentError when
// a - 1 + N/2 <= 0 (degenerate posterior).
double mapem_tau_step(const Vector& residuals, double a, double b,
                      double log_tau, int steps = 1);

// Runs the M-step to convergence (terminal full M-step).
double mapem_tau_converge(const Vector& residuals, double a, double b,
                          double log_tau);

// Closed-form stationary point (a - 1 + N/2)/(b + sum r^2 / 2).
double mapem_tau_fixed_point(const Vector& residuals, double a, double b);

}  // namespace cdrop
