#include "cdrop/uncertainty.hpp"

#include <cmath>
#include <numbers>

namespace cdrop {

PredictiveSamples mc_predict(Mlp& model, const Matrix& X, int S,
                             RngStream& rng) {
  if (S < 1) throw ArgumentError("mc_predict: S must be >= 1");
  PredictiveSamples out;
  out.S = S;
  out.means.reserve(std::size_t(S));
  out.variances.reserve(std::size_t(S));
  const double homo_var = std::exp(-model.log_tau);
  for (int s = 0; s < S; ++s) {
    RngStream sub = rng.fork();
    const Matrix y = model.forward(X, sub);
    out.means.push_back(model.mean_of(y));
    if (model.heteroscedastic)
      out.variances.push_back(model.log_var_of(y).array().exp().matrix());
    else
      out.variances.push_back(
          Matrix::Constant(y.rows(), y.cols(), homo_var));
  }
  return out;
}

Matrix mean_prediction(const PredictiveSamples& samples) {
  if (samples.means.empty()) throw ArgumentError("mean_prediction: no samples");
  Matrix acc = Matrix::Zero(samples.means.front().rows(),
                            samples.means.front().cols());
  for (const auto& m : samples.means) acc += m;
  return acc / double(samples.means.size());
}

UncertaintyDecomposition decompose(const PredictiveSamples& samples) {
  if (samples.S < 2 || samples.means.size() < 2)
    throw ArgumentError("decompose: needs S >= 2 samples, got " +
                        std::to_string(samples.means.size()));
  const Eigen::Index b = samples.means.front().rows();
  const Eigen::Index d = samples.means.front().cols();
  const double inv_s = 1.0 / double(samples.means.size());

  const Matrix mu = mean_prediction(samples);

  UncertaintyDecomposition out;
  out.epistemic_var = Matrix::Zero(b, d);
  for (const auto& m : samples.means) {
    const Matrix dev = m - mu;
    out.epistemic_var += dev.cwiseProduct(dev);
  }
  out.epistemic_var *= inv_s;  // population variance

  out.aleatoric_var = Matrix::Zero(b, d);
  for (const auto& v : samples.variances) out.aleatoric_var += v;
  out.aleatoric_var *= inv_s;

  out.predictive_var = out.epistemic_var + out.aleatoric_var;
  return out;
}

Matrix classification_predict(Mlp& model, const Matrix& X, int S,
                              RngStream& rng) {
  if (S < 1) throw ArgumentError("classification_predict: S must be >= 1");
  Matrix acc;
  for (int s = 0; s < S; ++s) {
    RngStream sub = rng.fork();
    const Matrix logits = model.forward(X, sub);
    if (s == 0) acc = Matrix::Zero(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double m = logits.row(i).maxCoeff();
      double z = 0.0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        z += std::exp(logits(i, c) - m);
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        acc(i, c) += std::exp(logits(i, c) - m) / z;
    }
  }
  return acc / double(S);
}

CalibrationCurve calibration_curve(const UncertaintyDecomposition& decomp,
                                   const Vector& means, const Vector& targets,
                                   const std::vector<double>& levels) {
  if (decomp.predictive_var.cols() != 1)
    throw ArgumentError("calibration_curve: needs 1-D regression outputs, got " +
                        shape_str(decomp.predictive_var));
  const Eigen::Index b = decomp.predictive_var.rows();
  if (means.size() != b || targets.size() != b)
    throw DimensionError("calibration_curve: " + std::to_string(b) +
                         " variances vs " + std::to_string(means.size()) +
                         " means and " + std::to_string(targets.size()) +
                         " targets");
  if (b == 0) throw ArgumentError("calibration_curve: no points");
  if (levels.empty()) throw ArgumentError("calibration_curve: no levels");

  // Probability mass of the centred interval that just reaches each target.
  Vector cover(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const double var = decomp.predictive_var(i, 0);
    if (var <= 0.0)
      throw ArgumentError(
          "calibration_curve: degenerate interval, zero predictive variance "
          "at point " +
          std::to_string(i));
    const double z = std::abs(targets[i] - means[i]) / std::sqrt(var);
    cover[i] = std::erf(z / std::numbers::sqrt2);  // 2*Phi(z) - 1
  }

  CalibrationCurve curve;
  double acc = 0.0;
  for (double q : levels) {
    if (q < 0.0 || q > 1.0)
      throw ArgumentError("calibration_curve: level " + std::to_string(q) +
                          " outside [0, 1]");
    CalibrationBin bin;
    bin.level = q;
    for (Eigen::Index i = 0; i < b; ++i) bin.count += (cover[i] <= q);
    bin.empirical = double(bin.count) / double(b);
    acc += (bin.empirical - q) * (bin.empirical - q);
    curve.bins.push_back(bin);
  }
  curve.rmse = std::sqrt(acc / double(levels.size()));
  return curve;
}

}  // namespace cdrop
