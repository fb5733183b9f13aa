#pragma once

#include <vector>

#include "cdrop/layers.hpp"

namespace cdrop {

// S stochastic forward passes: per sample the predicted means and the
// aleatoric variances (exp of the head's log-variance, or the constant 1/tau).
struct PredictiveSamples {
  std::vector<Matrix> means;      // S entries, each B x D
  std::vector<Matrix> variances;  // S entries, each B x D, elementwise >= 0
  int S = 0;
};

// Fresh masks per sample; one forked RNG substream per pass, so results do
// not depend on what the caller draws afterwards.
PredictiveSamples mc_predict(Mlp& model, const Matrix& X, int S,
                             RngStream& rng);

// Ordered (sample-index) mean of the predicted means.
Matrix mean_prediction(const PredictiveSamples& samples);

struct UncertaintyDecomposition {
  Matrix epistemic_var;   // population variance over samples of the means
  Matrix aleatoric_var;   // mean over samples of the variances
  Matrix predictive_var;  // sum of the two, exactly

  Matrix epistemic_std() const { return epistemic_var.cwiseSqrt(); }
  Matrix aleatoric_std() const { return aleatoric_var.cwiseSqrt(); }
  Matrix predictive_std() const { return predictive_var.cwiseSqrt(); }
};

// Requires S >= 2 (population variance is otherwise meaningless).
UncertaintyDecomposition decompose(const PredictiveSamples& samples);

// Mean softmax probabilities over S mask samples; rows sum to 1.
Matrix classification_predict(Mlp& model, const Matrix& X, int S,
                              RngStream& rng);

struct CalibrationBin {
  double level = 0.0;      // nominal probability mass of the centred interval
  double empirical = 0.0;  // fraction of targets inside it
  long long count = 0;     // number of targets inside (empirical * B)
};

struct CalibrationCurve {
  std::vector<CalibrationBin> bins;
  double rmse = 0.0;  // root-mean-square of (empirical - nominal) over levels
};

// Centred Gaussian predictive intervals: a target falls inside the level-q
// interval when 2*Phi(|y-mean|/std) - 1 <= q. Throws on zero predictive
// variance (degenerate interval) and on levels outside [0,1].
CalibrationCurve calibration_curve(const UncertaintyDecomposition& decomp,
                                   const Vector& means, const Vector& targets,
                                   const std::vector<double>& levels);

}  // namespace cdrop
