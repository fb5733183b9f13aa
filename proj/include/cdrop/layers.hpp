#pragma once

#include <string>
#include <vector>

#include "cdrop/rng.hpp"
#include "cdrop/tensor.hpp"

namespace cdrop {

// Epsilon shift applied inside the relaxation's four logs.
inline constexpr double kLogEps = 1e-7;
inline constexpr double kDefaultTemperature = 0.1;

double sigmoid(double x);

// Relaxed drop indicator z = sigmoid((log p - log(1-p) + log u - log(1-u))/t).
// Always strictly inside (0,1), and built so that swapping (p -> 1-p, u -> 1-u)
// yields exactly 1-z. Throws ArgumentError for t <= 0.
double concrete_drop_prob(double p, double u, double t);

enum class Activation { identity, relu };

struct DenseLayer {
  Matrix W;  // out_dim x in_dim
  Vector b;  // out_dim
  Activation activation = Activation::identity;

  Eigen::Index in_dim() const { return W.cols(); }
  Eigen::Index out_dim() const { return W.rows(); }
};

// One noise realisation; a sampled mask corresponds to one function draw.
struct MaskRealisation {
  Matrix u;       // uniforms, shape of the dropped input
  Matrix z_drop;  // relaxed drop indicators, strictly inside (0,1)
};

struct LayerGrads {
  Matrix dW;
  Vector db;
  double dp_logit = 0.0;
};

// Dense layer whose *input* gets concrete dropout: the input is multiplied by
// (1 - z)/(1 - p) elementwise before the affine map, and the drop probability
// p = sigmoid(p_logit) is itself a trained parameter. Temperature is fixed.
class ConcreteDropoutLayer {
 public:
  ConcreteDropoutLayer(DenseLayer inner_, double p_logit_,
                       double temperature_ = kDefaultTemperature);

  DenseLayer inner;
  double p_logit;
  double temperature;

  // Regularisation coefficients, installed when an objective is configured.
  double weight_reg = 0.0;
  double dropout_reg = 0.0;

  // With dropout disabled the layer is a plain dense layer; p_logit is inert.
  bool dropout_enabled = true;

  double p() const { return sigmoid(p_logit); }
  // Keep the rescale denominator away from zero even at saturated p.
  double retain() const;
  Eigen::Index in_dim() const { return inner.in_dim(); }
  Eigen::Index out_dim() const { return inner.out_dim(); }

  // Records input, mask and pre-activation for the backward pass.
  Matrix forward(const Matrix& x, RngStream& rng);

  // Reverse-mode gradients of the sampled loss through the recorded
  // realisation. The p_logit gradient flows through both the relaxation and
  // the 1/(1-p) rescaling. Returns the input gradient.
  Matrix backward(const Matrix& upstream, LayerGrads& grads) const;

  const MaskRealisation& last_mask() const;  // StateError when nothing recorded
  void clear_recorded() { cache_.valid = false; }

 private:
  struct Cache {
    Matrix x, dropped, preact;
    MaskRealisation mask;
    bool valid = false;
  };
  Cache cache_;
};

struct DropResult {
  Matrix output;
  MaskRealisation mask;
};

// output = x .* (1 - z)/(1 - p) with fresh uniforms per element.
DropResult apply_concrete_dropout(const Matrix& x,
                                  const ConcreteDropoutLayer& layer,
                                  RngStream& rng);

struct ModelGrads {
  std::vector<LayerGrads> layers;
  double dlog_tau = 0.0;
};

struct MlpConfig {
  Eigen::Index input_dim = 1;
  std::vector<Eigen::Index> hidden;
  Eigen::Index output_dim = 1;
  // Heteroscedastic head doubles the final width: columns [0,D) carry the
  // predicted mean, [D,2D) the per-point log variance.
  bool heteroscedastic = false;
  Activation hidden_activation = Activation::relu;
  double temperature = kDefaultTemperature;
  // p_logit drawn Uniform(lo, hi); defaults put p between ~0.12 and 0.5.
  double p_logit_init_lo = -2.0;
  double p_logit_init_hi = 0.0;
  bool dropout = true;
};

struct ParamGroup {
  std::string name;
  Eigen::Index offset;
  Eigen::Index size;
};

// Multilayer perceptron of concrete-dropout layers; the output layer is
// wrapped too. log_tau is the (optionally learned) observation precision and
// lives outside the flat variational parameter vector.
class Mlp {
 public:
  // Weights ~ N(0, 1/in_dim), biases zero, p_logit ~ U(lo, hi). Draw order per
  // layer: W row-major, then p_logit.
  static Mlp build(const MlpConfig& cfg, RngStream& rng);

  std::vector<ConcreteDropoutLayer> layers;
  double log_tau = -2.0;
  bool heteroscedastic = false;
  Eigen::Index output_dim = 1;  // mean dimensions D (head width is 2D when het)

  Eigen::Index in_dim() const { return layers.front().in_dim(); }

  Matrix forward(const Matrix& x, RngStream& rng);
  // Backpropagates through the realisation recorded by the last forward.
  Matrix backward(const Matrix& upstream, ModelGrads& grads);

  // Split a heteroscedastic head into mean / log-variance blocks.
  Matrix mean_of(const Matrix& out) const;
  Matrix log_var_of(const Matrix& out) const;

  std::vector<double> drop_probabilities() const;

  // Flat parameter vector: per layer [W row-major, b, p_logit when dropout is
  // enabled]; log_tau excluded.
  Eigen::Index param_count() const;
  Vector get_params() const;
  void set_params(const Vector& theta);
  Vector flatten(const ModelGrads& grads) const;
  std::vector<ParamGroup> param_groups() const;
};

ModelGrads make_zero_grads(const Mlp& model);

}  // namespace cdrop
