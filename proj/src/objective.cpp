#include "cdrop/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cdrop {
namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5*log(2*pi)

double clamp_unit(double p) {
  return std::min(std::max(p, kLogEps), 1.0 - kLogEps);
}

// p log p + (1-p) log(1-p) on the clamped interior.
double bernoulli_log_term(double p) {
  const double pc = clamp_unit(p);
  return pc * std::log(pc) + (1.0 - pc) * std::log(1.0 - pc);
}

// d/dp of the term above; zero where the clamp is active.
double bernoulli_log_term_dp(double p) {
  if (p <= kLogEps || p >= 1.0 - kLogEps) return 0.0;
  return std::log(p) - std::log(1.0 - p);
}

void check_targets(const Mlp& model, const Matrix& X, const Targets& targets,
                   const ObjectiveConfig& cfg) {
  cfg.validate();
  if (X.rows() < 1) throw ArgumentError("elbo_loss: empty batch");
  if (targets.rows() != X.rows())
    throw DimensionError("elbo_loss: batch has " + std::to_string(X.rows()) +
                         " rows but targets have " +
                         std::to_string(targets.rows()));
  const bool wants_classes = cfg.loss_kind == LossKind::cross_entropy;
  if (wants_classes != targets.classification)
    throw ConfigError("elbo_loss: loss kind does not match target kind");
  const bool wants_head = cfg.precision_mode == PrecisionMode::heteroscedastic_head;
  if (wants_head != model.heteroscedastic)
    throw ConfigError(
        "elbo_loss: precision mode does not match the model head");
  if (wants_classes && wants_head)
    throw ConfigError("elbo_loss: heteroscedastic head is a regression device");
}

std::vector<double> regulariser_values(const Mlp& model) {
  std::vector<double> regs;
  regs.reserve(model.layers.size());
  for (const auto& layer : model.layers) regs.push_back(layer_kl_regulariser(layer));
  return regs;
}

void add_regulariser_grads(const Mlp& model, ModelGrads& grads) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    if (!layer.dropout_enabled) {
      grads.layers[l].dW += 2.0 * layer.weight_reg * layer.inner.W;
      continue;
    }
    const double r = layer.retain();
    grads.layers[l].dW += (2.0 * layer.weight_reg / r) * layer.inner.W;

    const double p = layer.p();
    double dp = layer.dropout_reg * double(layer.in_dim()) *
                bernoulli_log_term_dp(p);
    if (1.0 - p > kLogEps)  // rescale path frozen while the clamp is active
      dp += layer.weight_reg * layer.inner.W.squaredNorm() / (r * r);
    grads.layers[l].dp_logit += dp * p * (1.0 - p);
  }
}

ElboResult elbo_impl(Mlp& model, const Matrix& X, const Targets& targets,
                     const ObjectiveConfig& cfg, RngStream& rng,
                     ModelGrads* grads) {
  check_targets(model, X, targets, cfg);
  const Matrix out = model.forward(X, rng);
  const double inv_b = 1.0 / double(X.rows());

  ElboResult res;
  Matrix upstream;  // dNLL/dout, only built when gradients are wanted

  if (cfg.loss_kind == LossKind::cross_entropy) {
    res.nll = cross_entropy_nll(out, targets.labels);
    if (grads) {
      upstream.resize(out.rows(), out.cols());
      for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double m = out.row(i).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < out.cols(); ++c)
          z += std::exp(out(i, c) - m);
        for (Eigen::Index c = 0; c < out.cols(); ++c)
          upstream(i, c) = std::exp(out(i, c) - m) / z * inv_b;
        upstream(i, targets.labels[std::size_t(i)]) -= inv_b;
      }
    }
  } else if (model.heteroscedastic) {
    const Matrix f = model.mean_of(out);
    const Matrix lv = model.log_var_of(out);
    if (targets.y.cols() != f.cols())
      throw DimensionError("elbo_loss: targets " + shape_str(targets.y) +
                           " do not match mean head " + shape_str(f));
    res.nll = gaussian_nll(targets.y, f, lv);
    if (grads) {
      upstream.resize(out.rows(), out.cols());
      for (Eigen::Index i = 0; i < f.rows(); ++i)
        for (Eigen::Index d = 0; d < f.cols(); ++d) {
          const double r = f(i, d) - targets.y(i, d);
          const double itau = std::exp(-lv(i, d));
          upstream(i, d) = inv_b * itau * r;
          upstream(i, f.cols() + d) = inv_b * 0.5 * (1.0 - itau * r * r);
        }
    }
  } else {
    if (targets.y.cols() != out.cols())
      throw DimensionError("elbo_loss: targets " + shape_str(targets.y) +
                           " do not match output " + shape_str(out));
    const double lv = -model.log_tau;
    res.nll = gaussian_nll(targets.y, out, lv);
    if (grads) {
      const double tau = std::exp(model.log_tau);
      upstream = inv_b * tau * (out - targets.y);
      // d/dlog_tau of mean_i sum_d [0.5 tau r^2 - 0.5 log tau + c]
      double acc = 0.0;
      for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index d = 0; d < out.cols(); ++d) {
          const double r = targets.y(i, d) - out(i, d);
          acc += 0.5 * tau * r * r - 0.5;
        }
      grads->dlog_tau = acc * inv_b;
    }
  }

  res.layer_regs = regulariser_values(model);
  res.loss = res.nll;
  for (double v : res.layer_regs) res.loss += v;

  if (grads) {
    model.backward(upstream, *grads);
    add_regulariser_grads(model, *grads);
  }
  return res;
}

}  // namespace

double ObjectiveConfig::weight_reg(Eigen::Index k_in) const {
  return lengthscale * lengthscale * double(k_in) / (reg_tau * double(N));
}

double ObjectiveConfig::dropout_reg() const {
  const double factor = loss_kind == LossKind::cross_entropy ? 1.0 : 2.0;
  return factor / (reg_tau * double(N));
}

void ObjectiveConfig::validate() const {
  if (N < 1)
    throw ConfigError("ObjectiveConfig: N must be >= 1, got " +
                      std::to_string(N));
  if (lengthscale < 0.0)
    throw ConfigError("ObjectiveConfig: lengthscale must be >= 0");
  if (reg_tau <= 0.0) throw ConfigError("ObjectiveConfig: reg_tau must be > 0");
  if (tau_prior_shape <= 0.0 || tau_prior_rate < 0.0)
    throw ConfigError("ObjectiveConfig: invalid Gamma prior parameters");
}

void configure_regularisation(Mlp& model, const ObjectiveConfig& cfg) {
  cfg.validate();
  for (auto& layer : model.layers) {
    layer.weight_reg = cfg.weight_reg(layer.in_dim());
    layer.dropout_reg = cfg.dropout_reg();
  }
}

double bernoulli_entropy(double p) { return -bernoulli_log_term(p); }

double layer_kl_regulariser(const ConcreteDropoutLayer& layer) {
  const double w2 = layer.inner.W.squaredNorm();
  if (!layer.dropout_enabled) return layer.weight_reg * w2;
  const double p = layer.p();
  return layer.weight_reg * w2 / layer.retain() +
         layer.dropout_reg * double(layer.in_dim()) * bernoulli_log_term(p);
}

double gaussian_nll(const Matrix& y, const Matrix& f, const Matrix& log_var) {
  if (y.rows() != f.rows() || y.cols() != f.cols() ||
      f.rows() != log_var.rows() || f.cols() != log_var.cols())
    throw DimensionError("gaussian_nll: shapes disagree: y " + shape_str(y) +
                         ", f " + shape_str(f) + ", log_var " +
                         shape_str(log_var));
  if (y.rows() == 0) throw ArgumentError("gaussian_nll: empty batch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index d = 0; d < y.cols(); ++d) {
      const double r = y(i, d) - f(i, d);
      acc += 0.5 * std::exp(-log_var(i, d)) * r * r + 0.5 * log_var(i, d) +
             kHalfLog2Pi;
    }
  return acc / double(y.rows());
}

double gaussian_nll(const Matrix& y, const Matrix& f, double log_var) {
  return gaussian_nll(y, f, Matrix::Constant(y.rows(), y.cols(), log_var));
}

double cross_entropy_nll(const Matrix& logits, const std::vector<int>& labels) {
  if (Eigen::Index(labels.size()) != logits.rows())
    throw DimensionError("cross_entropy_nll: " + std::to_string(logits.rows()) +
                         " logit rows vs " + std::to_string(labels.size()) +
                         " labels");
  if (logits.rows() == 0) throw ArgumentError("cross_entropy_nll: empty batch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int label = labels[std::size_t(i)];
    if (label < 0 || label >= logits.cols())
      throw DataError("cross_entropy_nll: label " + std::to_string(label) +
                      " outside [0, " + std::to_string(logits.cols()) +
                      ") at row " + std::to_string(i));
    const double m = logits.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
      z += std::exp(logits(i, c) - m);
    acc += std::log(z) + m - logits(i, label);
  }
  return acc / double(logits.rows());
}

ElboResult elbo_loss(Mlp& model, const Matrix& X, const Targets& targets,
                     const ObjectiveConfig& cfg, RngStream& rng) {
  return elbo_impl(model, X, targets, cfg, rng, nullptr);
}

ElboResult elbo_loss_grad(Mlp& model, const Matrix& X, const Targets& targets,
                          const ObjectiveConfig& cfg, RngStream& rng,
                          ModelGrads& grads) {
  return elbo_impl(model, X, targets, cfg, rng, &grads);
}

namespace {

// MAP objective coefficients: J(log_tau) = c*log_tau - tau*d.
struct MapCoeffs {
  double c, d;
};

MapCoeffs map_coeffs(const Vector& residuals, double a, double b) {
  const double n = double(residuals.size());
  const double c = n / 2.0 + a - 1.0;
  if (c <= 0.0)
    throw ArgumentError(
        "mapem: degenerate posterior, a - 1 + N/2 <= 0 (N = " +
        std::to_string(residuals.size()) + ", a = " + std::to_string(a) + ")");
  double ssr = 0.0;
  for (Eigen::Index i = 0; i < residuals.size(); ++i)
    ssr += residuals[i] * residuals[i];
  return {c, ssr / 2.0 + b};
}

// One natural-scaled ascent update, clamped for stability far from the optimum.
double ascend(double log_tau, const MapCoeffs& mc) {
  const double g = mc.c - std::exp(log_tau) * mc.d;  // dJ/dlog_tau
  const double step = std::clamp(g / mc.c, -5.0, 5.0);
  return log_tau + step;
}

}  // namespace

double mapem_tau_step(const Vector& residuals, double a, double b,
                      double log_tau, int steps) {
  if (steps < 1) throw ArgumentError("mapem_tau_step: steps must be >= 1");
  const MapCoeffs mc = map_coeffs(residuals, a, b);
  for (int s = 0; s < steps; ++s) log_tau = ascend(log_tau, mc);
  return log_tau;
}

double mapem_tau_converge(const Vector& residuals, double a, double b,
                          double log_tau) {
  const MapCoeffs mc = map_coeffs(residuals, a, b);
  for (int s = 0; s < 10000; ++s) {
    const double next = ascend(log_tau, mc);
    if (std::abs(next - log_tau) <= 1e-14 * std::max(1.0, std::abs(log_tau)))
      return next;
    log_tau = next;
  }
  return log_tau;
}

double mapem_tau_fixed_point(const Vector& residuals, double a, double b) {
  const MapCoeffs mc = map_coeffs(residuals, a, b);
  if (mc.d <= 0.0)
    throw ArgumentError("mapem: fixed point undefined for b + SSR/2 <= 0");
  return mc.c / mc.d;
}

}  // namespace cdrop
