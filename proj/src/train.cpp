#include "cdrop/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace cdrop {

void adam_step(Vector& params, const Vector& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
  if (grads.size() != params.size())
    throw DimensionError("adam_step: " + std::to_string(params.size()) +
                         " params vs " + std::to_string(grads.size()) +
                         " grads");
  if (state.m.size() == 0) {
    state.m = Vector::Zero(params.size());
    state.v = Vector::Zero(params.size());
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(beta1, double(state.t));
  const double c2 = 1.0 - std::pow(beta2, double(state.t));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

void sgd_step(Vector& params, const Vector& grads, double lr) {
  if (grads.size() != params.size())
    throw DimensionError("sgd_step: " + std::to_string(params.size()) +
                         " params vs " + std::to_string(grads.size()) +
                         " grads");
  params -= lr * grads;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (learning_rate <= 0.0)
    throw ConfigError("TrainConfig: learning_rate must be > 0");
  if (log_every < 1) throw ConfigError("TrainConfig: log_every must be >= 1");
  if (tau_steps_per_epoch < 1)
    throw ConfigError("TrainConfig: tau_steps_per_epoch must be >= 1");
}

std::vector<double> TrainTrace::converged_p() const {
  if (rows.empty()) throw StateError("converged_p: empty trace");
  const std::size_t layers = rows.front().p.size();
  const std::size_t tail =
      std::max<std::size_t>(1, (rows.size() + 19) / 20);  // last 5%, rounded up
  std::vector<double> out(layers, 0.0);
  for (std::size_t r = rows.size() - tail; r < rows.size(); ++r)
    for (std::size_t l = 0; l < layers; ++l) out[l] += rows[r].p[l];
  for (auto& v : out) v /= double(tail);
  return out;
}

// Last logged value; after MAP-EM training the model itself carries the
// post-terminal-M-step log_tau.
double TrainTrace::converged_log_tau() const {
  if (rows.empty()) throw StateError("converged_log_tau: empty trace");
  return rows.back().log_tau;
}

void TrainTrace::write_csv(std::ostream& os) const {
  const std::size_t layers = rows.empty() ? 0 : rows.front().p.size();
  os << "step,loss";
  for (std::size_t l = 0; l < layers; ++l) os << ",p_layer_" << l;
  os << ",log_tau\n";
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf;
  };
  for (const auto& row : rows) {
    os << row.step << ',';
    put(row.loss);
    for (double p : row.p) {
      os << ',';
      put(p);
    }
    os << ',';
    put(row.log_tau);
    os << '\n';
  }
}

namespace {

Vector model_residuals(Mlp& model, const Matrix& X, const Matrix& Y,
                       RngStream& rng) {
  const Matrix out = model.forward(X, rng);
  const Matrix diff = Y - out;
  Vector r(diff.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < diff.rows(); ++i)
    for (Eigen::Index j = 0; j < diff.cols(); ++j) r[k++] = diff(i, j);
  return r;
}

}  // namespace

TrainTrace train(Mlp& model, const Matrix& X, const Targets& targets,
                 const ObjectiveConfig& obj, const TrainConfig& cfg) {
  cfg.validate();
  obj.validate();
  const Eigen::Index n = X.rows();
  if (n < 1) throw ArgumentError("train: empty dataset");
  if (targets.rows() != n)
    throw DimensionError("train: " + std::to_string(n) + " inputs vs " +
                         std::to_string(targets.rows()) + " targets");
  if (obj.N != n)
    throw ConfigError("train: objective N = " + std::to_string(obj.N) +
                      " does not match dataset size " + std::to_string(n));

  const Eigen::Index batch = std::min(cfg.batch_size, n);
  const bool mapem = obj.precision_mode == PrecisionMode::homoscedastic_mapem;
  if (mapem && targets.classification)
    throw ConfigError("train: MAP-EM precision applies to regression only");
  configure_regularisation(model, obj);

  RngStream root(cfg.seed);
  RngStream shuffle_rng = root.fork();
  RngStream noise_rng = root.fork();

  Vector params = model.get_params();
  AdamState adam;
  ModelGrads grads = make_zero_grads(model);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  Matrix xb(batch, X.cols());
  Matrix yb;
  if (!targets.classification) yb.resize(batch, targets.y.cols());

  TrainTrace trace;
  const auto t0 = std::chrono::steady_clock::now();
  long long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the dedicated shuffle stream.
    for (Eigen::Index i = n - 1; i > 0; --i) {
      const auto j =
          Eigen::Index(shuffle_rng.next_u64() % std::uint64_t(i + 1));
      std::swap(order[std::size_t(i)], order[std::size_t(j)]);
    }

    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index m = std::min(batch, n - start);
      xb.resize(m, X.cols());
      Targets tb;
      tb.classification = targets.classification;
      if (targets.classification) {
        tb.labels.resize(std::size_t(m));
      } else {
        yb.resize(m, targets.y.cols());
      }
      for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Index src = order[std::size_t(start + i)];
        xb.row(i) = X.row(src);
        if (targets.classification)
          tb.labels[std::size_t(i)] = targets.labels[std::size_t(src)];
        else
          yb.row(i) = targets.y.row(src);
      }
      if (!targets.classification) tb.y = yb;

      const ElboResult res =
          elbo_loss_grad(model, xb, tb, obj, noise_rng, grads);
      if (!std::isfinite(res.loss))
        throw TrainingError("train: loss is not finite", step);

      if (step % cfg.log_every == 0) {
        TraceRow row;
        row.step = step;
        row.loss = res.loss;
        row.p = model.drop_probabilities();
        row.log_tau = model.log_tau;
        row.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        trace.rows.push_back(std::move(row));
      }

      const Vector g = model.flatten(grads);
      if (cfg.optimiser == Optimiser::adam)
        adam_step(params, g, adam, cfg.learning_rate, cfg.beta1, cfg.beta2,
                  cfg.adam_eps);
      else
        sgd_step(params, g, cfg.learning_rate);
      model.set_params(params);
      ++step;
    }

    if (mapem) {
      const Vector r = model_residuals(model, X, targets.y, noise_rng);
      model.log_tau =
          mapem_tau_step(r, obj.tau_prior_shape, obj.tau_prior_rate,
                         model.log_tau, cfg.tau_steps_per_epoch);
    }
  }

  if (mapem) {
    // Terminal full M-step, run to convergence.
    const Vector r = model_residuals(model, X, targets.y, noise_rng);
    model.log_tau = mapem_tau_converge(r, obj.tau_prior_shape,
                                       obj.tau_prior_rate, model.log_tau);
  }
  return trace;
}

GradCheckReport grad_check(const Mlp& model, const Matrix& X,
                           const Targets& targets, const ObjectiveConfig& obj,
                           const RngStream& rng, double h) {
  if (h <= 0.0) throw ArgumentError("grad_check: h must be > 0");

  Mlp work = model;
  ModelGrads grads = make_zero_grads(work);
  {
    RngStream r = rng;
    elbo_loss_grad(work, X, targets, obj, r, grads);
  }
  const Vector analytic = work.flatten(grads);

  auto loss_at = [&](const Vector& theta, double log_tau) {
    Mlp m = model;
    m.set_params(theta);
    m.log_tau = log_tau;
    RngStream r = rng;  // frozen noise across every evaluation
    return elbo_loss(m, X, targets, obj, r).loss;
  };

  const Vector theta = model.get_params();
  auto rel_err = [](double a, double f) {
    return std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-6});
  };

  GradCheckReport report;
  for (const auto& group : model.param_groups()) {
    GradCheckGroup g{group.name, 0.0};
    for (Eigen::Index k = group.offset; k < group.offset + group.size; ++k) {
      Vector tp = theta, tm = theta;
      tp[k] += h;
      tm[k] -= h;
      const double fd =
          (loss_at(tp, model.log_tau) - loss_at(tm, model.log_tau)) / (2 * h);
      g.max_rel_err = std::max(g.max_rel_err, rel_err(analytic[k], fd));
    }
    report.max_rel_err = std::max(report.max_rel_err, g.max_rel_err);
    report.groups.push_back(std::move(g));
  }

  // log_tau enters the likelihood in the non-heteroscedastic regression modes.
  if (!model.heteroscedastic && obj.loss_kind == LossKind::euclidean) {
    const double fd = (loss_at(theta, model.log_tau + h) -
                       loss_at(theta, model.log_tau - h)) /
                      (2 * h);
    GradCheckGroup g{"log_tau", rel_err(grads.dlog_tau, fd)};
    report.max_rel_err = std::max(report.max_rel_err, g.max_rel_err);
    report.groups.push_back(std::move(g));
  }
  return report;
}

double relu_kink_margin(const Mlp& model, const Matrix& X,
                        const RngStream& rng) {
  RngStream r(rng);  // consume the same draws as Mlp::forward would
  Matrix h = X;
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& layer : model.layers) {
    const Matrix dropped = layer.dropout_enabled
                               ? apply_concrete_dropout(h, layer, r).output
                               : h;
    Matrix pre = dropped * layer.inner.W.transpose();
    pre.rowwise() += layer.inner.b.transpose();
    if (layer.inner.activation == Activation::relu) {
      margin = std::min(margin, pre.cwiseAbs().minCoeff());
      h = pre.cwiseMax(0.0);
    } else {
      h = std::move(pre);
    }
  }
  return margin;
}

}  // namespace cdrop
