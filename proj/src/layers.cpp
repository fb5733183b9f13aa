#include "cdrop/layers.hpp"

#include <cmath>

namespace cdrop {
namespace {

// Largest double below 1; keeps relaxed indicators strictly inside (0,1).
constexpr double kBelowOne = 1.0 - 0x1.0p-53;

Matrix apply_activation(const Matrix& a, Activation act) {
  if (act == Activation::relu) return a.cwiseMax(0.0);
  return a;
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double concrete_drop_prob(double p, double u, double t) {
  if (t <= 0.0)
    throw ArgumentError("concrete_drop_prob: temperature must be > 0, got " +
                        std::to_string(t));
  // Grouping matters: the logit is (A-B) + (C-D), which negates exactly under
  // the swap (p,u) -> (1-p, 1-u); together with the |logit| branch below this
  // makes the z -> 1-z symmetry exact in floating point.
  const double logit = (std::log(p + kLogEps) - std::log(1.0 - p + kLogEps)) +
                       (std::log(u + kLogEps) - std::log(1.0 - u + kLogEps));
  const double a = std::abs(logit) / t;
  const double z_hi = std::min(1.0 / (1.0 + std::exp(-a)), kBelowOne);
  return logit >= 0.0 ? z_hi : 1.0 - z_hi;
}

ConcreteDropoutLayer::ConcreteDropoutLayer(DenseLayer inner_, double p_logit_,
                                           double temperature_)
    : inner(std::move(inner_)), p_logit(p_logit_), temperature(temperature_) {
  if (temperature <= 0.0)
    throw ArgumentError("ConcreteDropoutLayer: temperature must be > 0, got " +
                        std::to_string(temperature));
  if (inner.b.size() != inner.W.rows())
    throw DimensionError("ConcreteDropoutLayer: bias length " +
                         std::to_string(inner.b.size()) +
                         " does not match weight rows " +
                         std::to_string(inner.W.rows()));
}

double ConcreteDropoutLayer::retain() const {
  return std::max(1.0 - p(), kLogEps);
}

DropResult apply_concrete_dropout(const Matrix& x,
                                  const ConcreteDropoutLayer& layer,
                                  RngStream& rng) {
  if (x.cols() != layer.in_dim())
    throw DimensionError("apply_concrete_dropout: input " + shape_str(x) +
                         " does not match layer input dim " +
                         std::to_string(layer.in_dim()));
  DropResult r;
  r.mask.u = uniform(rng, x.rows(), x.cols());
  r.mask.z_drop.resize(x.rows(), x.cols());
  const double p = layer.p();
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      r.mask.z_drop(i, j) =
          concrete_drop_prob(p, r.mask.u(i, j), layer.temperature);
  r.output = x.cwiseProduct((1.0 - r.mask.z_drop.array()).matrix()) /
             layer.retain();
  return r;
}

Matrix ConcreteDropoutLayer::forward(const Matrix& x, RngStream& rng) {
  cache_.x = x;
  if (dropout_enabled) {
    DropResult r = apply_concrete_dropout(x, *this, rng);
    cache_.dropped = std::move(r.output);
    cache_.mask = std::move(r.mask);
  } else {
    if (x.cols() != in_dim())
      throw DimensionError("forward: input " + shape_str(x) +
                           " does not match layer input dim " +
                           std::to_string(in_dim()));
    cache_.dropped = x;
    cache_.mask = MaskRealisation{};
  }
  cache_.preact = cache_.dropped * inner.W.transpose();
  cache_.preact.rowwise() += inner.b.transpose();
  cache_.valid = true;
  return apply_activation(cache_.preact, inner.activation);
}

Matrix ConcreteDropoutLayer::backward(const Matrix& upstream,
                                      LayerGrads& grads) const {
  if (!cache_.valid)
    throw StateError("backward called with no recorded forward pass");
  if (upstream.rows() != cache_.preact.rows() ||
      upstream.cols() != cache_.preact.cols())
    throw DimensionError("backward: upstream " + shape_str(upstream) +
                         " does not match activations " +
                         shape_str(cache_.preact));

  Matrix ga = upstream;
  if (inner.activation == Activation::relu)
    ga = ga.cwiseProduct(
        (cache_.preact.array() > 0.0).cast<double>().matrix());

  grads.dW = ga.transpose() * cache_.dropped;
  grads.db = ga.colwise().sum().transpose();

  const Matrix gxd = ga * inner.W;
  if (!dropout_enabled) {
    grads.dp_logit = 0.0;
    return gxd;
  }

  const double pv = p();
  const double r = retain();
  const Matrix keep = (1.0 - cache_.mask.z_drop.array()).matrix();
  Matrix dx = gxd.cwiseProduct(keep) / r;

  // d(out)/dp splits into the relaxation path (through z) and the 1/(1-p)
  // rescale path; the latter vanishes while the retain clamp is active.
  const double dlogit_dp = 1.0 / (pv + kLogEps) + 1.0 / (1.0 - pv + kLogEps);
  double dp = 0.0;
  const Matrix& z = cache_.mask.z_drop;
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const double dz_dp = z(i, j) * (1.0 - z(i, j)) / temperature * dlogit_dp;
      dp += gxd(i, j) * (-cache_.x(i, j) / r) * dz_dp;
    }
  if (1.0 - pv > kLogEps) dp += sum(gxd.cwiseProduct(cache_.dropped)) / r;

  grads.dp_logit = dp * pv * (1.0 - pv);
  return dx;
}

const MaskRealisation& ConcreteDropoutLayer::last_mask() const {
  if (!cache_.valid || !dropout_enabled)
    throw StateError("no mask realisation recorded");
  return cache_.mask;
}

Mlp Mlp::build(const MlpConfig& cfg, RngStream& rng) {
  if (cfg.input_dim <= 0 || cfg.output_dim <= 0)
    throw ConfigError("Mlp: input and output dims must be positive");
  if (cfg.p_logit_init_hi < cfg.p_logit_init_lo)
    throw ConfigError("Mlp: p_logit init range is inverted");

  Mlp model;
  model.heteroscedastic = cfg.heteroscedastic;
  model.output_dim = cfg.output_dim;

  std::vector<Eigen::Index> widths;
  widths.push_back(cfg.input_dim);
  for (auto h : cfg.hidden) {
    if (h <= 0) throw ConfigError("Mlp: hidden widths must be positive");
    widths.push_back(h);
  }
  widths.push_back(cfg.heteroscedastic ? 2 * cfg.output_dim : cfg.output_dim);

  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const Eigen::Index in = widths[l], out = widths[l + 1];
    DenseLayer dense;
    dense.W = gaussian(rng, out, in, 0.0, 1.0 / std::sqrt(double(in)));
    dense.b = Vector::Zero(out);
    const bool last = (l + 2 == widths.size());
    dense.activation = last ? Activation::identity : cfg.hidden_activation;
    double pl = 0.0;
    if (cfg.dropout)
      pl = cfg.p_logit_init_lo +
           (cfg.p_logit_init_hi - cfg.p_logit_init_lo) * rng.next_uniform();
    ConcreteDropoutLayer layer(std::move(dense), pl, cfg.temperature);
    layer.dropout_enabled = cfg.dropout;
    model.layers.push_back(std::move(layer));
  }
  return model;
}

Matrix Mlp::forward(const Matrix& x, RngStream& rng) {
  Matrix h = x;
  for (auto& layer : layers) h = layer.forward(h, rng);
  return h;
}

Matrix Mlp::backward(const Matrix& upstream, ModelGrads& grads) {
  if (grads.layers.size() != layers.size())
    throw DimensionError("backward: gradient holder has " +
                         std::to_string(grads.layers.size()) +
                         " layers, model has " + std::to_string(layers.size()));
  Matrix g = upstream;
  for (std::size_t l = layers.size(); l-- > 0;)
    g = layers[l].backward(g, grads.layers[l]);
  return g;
}

Matrix Mlp::mean_of(const Matrix& out) const {
  return out.leftCols(output_dim);
}

Matrix Mlp::log_var_of(const Matrix& out) const {
  if (!heteroscedastic)
    throw StateError("log_var_of: model has no heteroscedastic head");
  return out.rightCols(output_dim);
}

std::vector<double> Mlp::drop_probabilities() const {
  std::vector<double> ps;
  ps.reserve(layers.size());
  for (const auto& layer : layers) ps.push_back(layer.p());
  return ps;
}

Eigen::Index Mlp::param_count() const {
  Eigen::Index n = 0;
  for (const auto& layer : layers) {
    n += layer.inner.W.size() + layer.inner.b.size();
    if (layer.dropout_enabled) n += 1;
  }
  return n;
}

Vector Mlp::get_params() const {
  Vector theta(param_count());
  Eigen::Index k = 0;
  for (const auto& layer : layers) {
    const Matrix& W = layer.inner.W;
    for (Eigen::Index i = 0; i < W.rows(); ++i)
      for (Eigen::Index j = 0; j < W.cols(); ++j) theta[k++] = W(i, j);
    for (Eigen::Index i = 0; i < layer.inner.b.size(); ++i)
      theta[k++] = layer.inner.b[i];
    if (layer.dropout_enabled) theta[k++] = layer.p_logit;
  }
  return theta;
}

void Mlp::set_params(const Vector& theta) {
  if (theta.size() != param_count())
    throw DimensionError("set_params: expected " +
                         std::to_string(param_count()) + " values, got " +
                         std::to_string(theta.size()));
  Eigen::Index k = 0;
  for (auto& layer : layers) {
    Matrix& W = layer.inner.W;
    for (Eigen::Index i = 0; i < W.rows(); ++i)
      for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = theta[k++];
    for (Eigen::Index i = 0; i < layer.inner.b.size(); ++i)
      layer.inner.b[i] = theta[k++];
    if (layer.dropout_enabled) layer.p_logit = theta[k++];
  }
}

Vector Mlp::flatten(const ModelGrads& grads) const {
  if (grads.layers.size() != layers.size())
    throw DimensionError("flatten: gradient holder does not match model");
  Vector g(param_count());
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Matrix& dW = grads.layers[l].dW;
    for (Eigen::Index i = 0; i < dW.rows(); ++i)
      for (Eigen::Index j = 0; j < dW.cols(); ++j) g[k++] = dW(i, j);
    for (Eigen::Index i = 0; i < grads.layers[l].db.size(); ++i)
      g[k++] = grads.layers[l].db[i];
    if (layers[l].dropout_enabled) g[k++] = grads.layers[l].dp_logit;
  }
  return g;
}

std::vector<ParamGroup> Mlp::param_groups() const {
  std::vector<ParamGroup> groups;
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string base = "layer" + std::to_string(l);
    const Eigen::Index wn = layers[l].inner.W.size();
    groups.push_back({base + ".W", k, wn});
    k += wn;
    const Eigen::Index bn = layers[l].inner.b.size();
    groups.push_back({base + ".b", k, bn});
    k += bn;
    if (layers[l].dropout_enabled) {
      groups.push_back({base + ".p_logit", k, 1});
      k += 1;
    }
  }
  return groups;
}

ModelGrads make_zero_grads(const Mlp& model) {
  ModelGrads g;
  g.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    g.layers[l].dW = Matrix::Zero(model.layers[l].inner.W.rows(),
                                  model.layers[l].inner.W.cols());
    g.layers[l].db = Vector::Zero(model.layers[l].inner.b.size());
    g.layers[l].dp_logit = 0.0;
  }
  g.dlog_tau = 0.0;
  return g;
}

}  // namespace cdrop
