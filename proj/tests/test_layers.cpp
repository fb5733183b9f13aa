#include <doctest.h>

#include <cmath>
#include <vector>

#include "cdrop/layers.hpp"

using cdrop::Activation;
using cdrop::ConcreteDropoutLayer;
using cdrop::DenseLayer;
using cdrop::LayerGrads;
using cdrop::Matrix;
using cdrop::Mlp;
using cdrop::MlpConfig;
using cdrop::RngStream;
using cdrop::Vector;

namespace {

DenseLayer make_dense(Eigen::Index out, Eigen::Index in, Activation act,
                      RngStream& rng) {
  DenseLayer d;
  d.W = cdrop::gaussian(rng, out, in, 0.0, 0.5);
  d.b = cdrop::gaussian(rng, out, 1, 0.0, 0.5);
  d.activation = act;
  return d;
}

}  // namespace

TEST_CASE("relaxed drop indicator: hand-checked scalar values") {
  // All logit terms cancel.
  CHECK(cdrop::concrete_drop_prob(0.5, 0.5, 0.1) == 0.5);

  // Straight-line re-evaluation of the formula.
  const double eps = 1e-7, t = 0.1;
  const double logit = (std::log(0.2 + eps) - std::log(0.8 + eps)) +
                       (std::log(0.9 + eps) - std::log(0.1 + eps));
  const double expected = 1.0 / (1.0 + std::exp(-logit / t));
  CHECK(cdrop::concrete_drop_prob(0.2, 0.9, 0.1) ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(cdrop::concrete_drop_prob(0.2, 0.9, 0.1) ==
        doctest::Approx(0.99970).epsilon(1e-4));

  // Near the zero-temperature limit the indicator thresholds at u = 1 - p.
  CHECK(cdrop::concrete_drop_prob(0.3, 0.71, 1e-6) > 0.999999);
  CHECK(cdrop::concrete_drop_prob(0.3, 0.69, 1e-6) < 1e-6);

  CHECK_THROWS_AS(cdrop::concrete_drop_prob(0.5, 0.5, 0.0),
                  cdrop::ArgumentError);
  CHECK_THROWS_AS(cdrop::concrete_drop_prob(0.5, 0.5, -1.0),
                  cdrop::ArgumentError);
}

TEST_CASE("relaxed drop indicator stays strictly inside (0,1) at extremes") {
  for (double t : {1e-6, 0.1, 1.0})
    for (double p : {1e-12, 0.01, 0.5, 0.99, 1.0 - 1e-12, 1.0})
      for (double u : {1e-12, 0.3, 0.999999999}) {
        const double z = cdrop::concrete_drop_prob(p, u, t);
        CHECK(z > 0.0);
        CHECK(z < 1.0);
      }
}

TEST_CASE("relaxed drop indicator is strictly increasing in p and u") {
  // Wide grid at t=1 and a narrow grid at t=0.1, both clear of saturation.
  auto grid = [](double lo, double hi, int n) {
    std::vector<double> g;
    for (int i = 0; i <= n; ++i) g.push_back(lo + (hi - lo) * i / n);
    return g;
  };
  struct Case {
    double t;
    std::vector<double> pts;
  };
  for (const auto& c : {Case{1.0, grid(1.0 / 16, 15.0 / 16, 14)},
                        Case{0.1, grid(0.25, 0.75, 16)}}) {
    for (double fixed : c.pts) {
      double prev_u = -1.0, prev_p = -1.0;
      for (double v : c.pts) {
        const double zu = cdrop::concrete_drop_prob(fixed, v, c.t);
        const double zp = cdrop::concrete_drop_prob(v, fixed, c.t);
        CHECK(zu > prev_u);
        CHECK(zp > prev_p);
        prev_u = zu;
        prev_p = zp;
      }
    }
  }
}

TEST_CASE("swapping (p,u) -> (1-p,1-u) flips the indicator exactly") {
  for (double t : {0.1, 1.0})
    for (int i = 1; i < 64; ++i)
      for (int j = 1; j < 64; ++j) {
        const double p = i / 64.0, u = j / 64.0;
        const double z = cdrop::concrete_drop_prob(p, u, t);
        CHECK(cdrop::concrete_drop_prob(1.0 - p, 1.0 - u, t) == 1.0 - z);
      }
}

TEST_CASE("apply_concrete_dropout: shape check, no-drop limit, frequencies") {
  RngStream rng(11);
  DenseLayer d = make_dense(2, 4, Activation::identity, rng);

  SUBCASE("shape mismatch names the offending input") {
    ConcreteDropoutLayer layer(d, 0.0);
    const Matrix x = Matrix::Zero(3, 5);
    CHECK_THROWS_AS(cdrop::apply_concrete_dropout(x, layer, rng),
                    cdrop::DimensionError);
  }

  SUBCASE("p_logit = -20 passes the input through") {
    ConcreteDropoutLayer layer(d, -20.0);
    const Matrix x = cdrop::gaussian(rng, 50, 4);
    const auto r = cdrop::apply_concrete_dropout(x, layer, rng);
    CHECK((r.output - x).cwiseAbs().maxCoeff() < 1e-6);
  }

  SUBCASE("hard-drop frequency at t ~ 0 matches p") {
    ConcreteDropoutLayer layer(d, 0.0, 1e-6);  // p = 0.5
    const Matrix x = Matrix::Ones(25000, 4);   // 1e5 elements
    const auto r = cdrop::apply_concrete_dropout(x, layer, rng);
    Eigen::Index dropped = 0;
    for (Eigen::Index i = 0; i < r.mask.z_drop.rows(); ++i)
      for (Eigen::Index j = 0; j < r.mask.z_drop.cols(); ++j) {
        const double z = r.mask.z_drop(i, j);
        REQUIRE(z > 0.0);
        REQUIRE(z < 1.0);
        dropped += (z > 0.5);
      }
    CHECK(std::abs(dropped / 1e5 - 0.5) < 0.01);
  }

  SUBCASE("the 1/(1-p) rescale keeps the mask unbiased at low temperature") {
    ConcreteDropoutLayer layer(d, std::log(0.3 / 0.7), 0.1);  // p = 0.3
    const Matrix x = Matrix::Ones(25000, 4);
    const auto r = cdrop::apply_concrete_dropout(x, layer, rng);
    CHECK(cdrop::mean(r.output) == doctest::Approx(1.0).epsilon(0.02));
  }
}

TEST_CASE("forward: zero parameters, no-drop limit, recorded-mask oracle") {
  RngStream rng(21);

  SUBCASE("zero weights and biases give zero pre-activation output") {
    DenseLayer d;
    d.W = Matrix::Zero(3, 4);
    d.b = Vector::Zero(3);
    ConcreteDropoutLayer layer(d, 0.3);
    const Matrix x = cdrop::gaussian(rng, 5, 4);
    CHECK(layer.forward(x, rng).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("p_logit = -20 with identity activation reduces to the dense map") {
    DenseLayer d = make_dense(3, 4, Activation::identity, rng);
    ConcreteDropoutLayer layer(d, -20.0);
    const Matrix x = cdrop::gaussian(rng, 6, 4);
    const Matrix y = layer.forward(x, rng);
    Matrix want = x * d.W.transpose();
    want.rowwise() += d.b.transpose();
    CHECK((y - want).cwiseAbs().maxCoeff() < 1e-6);
  }

  SUBCASE("straight-line re-evaluation from the recorded mask") {
    DenseLayer d = make_dense(3, 4, Activation::relu, rng);
    ConcreteDropoutLayer layer(d, -0.5);
    const Matrix x = cdrop::gaussian(rng, 6, 4);
    const Matrix y = layer.forward(x, rng);
    const auto& mask = layer.last_mask();
    const Matrix dropped =
        x.cwiseProduct((1.0 - mask.z_drop.array()).matrix()) / layer.retain();
    Matrix pre = dropped * d.W.transpose();
    pre.rowwise() += d.b.transpose();
    const Matrix want = pre.cwiseMax(0.0);
    CHECK((y - want).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((y.array() >= 0.0).all());
  }
}

namespace {

// Scalar probe loss sum(out .* C) evaluated with frozen noise.
double probe_loss(ConcreteDropoutLayer layer, const Matrix& x, const Matrix& c,
                  RngStream rng) {
  return cdrop::sum(layer.forward(x, rng).cwiseProduct(c));
}

}  // namespace

TEST_CASE("backward matches central finite differences under frozen noise") {
  RngStream rng(31);
  DenseLayer d = make_dense(2, 4, Activation::relu, rng);
  ConcreteDropoutLayer layer(d, -0.4);
  const Matrix x = cdrop::gaussian(rng, 3, 4);
  const Matrix c = cdrop::gaussian(rng, 3, 2);
  const RngStream frozen = rng;

  ConcreteDropoutLayer work = layer;
  RngStream fwd_rng = frozen;
  work.forward(x, fwd_rng);
  LayerGrads grads;
  const Matrix dx = work.backward(c, grads);  // upstream = dL/dout = c

  const double h = 1e-5;
  auto rel_err = [](double a, double f) {
    return std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-6});
  };

  for (Eigen::Index i = 0; i < d.W.rows(); ++i)
    for (Eigen::Index j = 0; j < d.W.cols(); ++j) {
      ConcreteDropoutLayer lp = layer, lm = layer;
      lp.inner.W(i, j) += h;
      lm.inner.W(i, j) -= h;
      const double fd =
          (probe_loss(lp, x, c, frozen) - probe_loss(lm, x, c, frozen)) /
          (2 * h);
      CHECK(rel_err(grads.dW(i, j), fd) < 1e-4);
    }
  for (Eigen::Index i = 0; i < d.b.size(); ++i) {
    ConcreteDropoutLayer lp = layer, lm = layer;
    lp.inner.b[i] += h;
    lm.inner.b[i] -= h;
    const double fd =
        (probe_loss(lp, x, c, frozen) - probe_loss(lm, x, c, frozen)) / (2 * h);
    CHECK(rel_err(grads.db[i], fd) < 1e-4);
  }
  {
    ConcreteDropoutLayer lp = layer, lm = layer;
    lp.p_logit += h;
    lm.p_logit -= h;
    const double fd =
        (probe_loss(lp, x, c, frozen) - probe_loss(lm, x, c, frozen)) / (2 * h);
    CHECK(rel_err(grads.dp_logit, fd) < 1e-4);
  }
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Matrix xp = x, xm = x;
      xp(i, j) += h;
      xm(i, j) -= h;
      const double fd =
          (probe_loss(layer, xp, c, frozen) - probe_loss(layer, xm, c, frozen)) /
          (2 * h);
      CHECK(rel_err(dx(i, j), fd) < 1e-4);
    }
}

TEST_CASE("backward edge cases") {
  RngStream rng(41);
  DenseLayer d = make_dense(3, 4, Activation::identity, rng);

  SUBCASE("backward before any forward is a state error") {
    ConcreteDropoutLayer layer(d, 0.0);
    LayerGrads g;
    CHECK_THROWS_AS(layer.backward(Matrix::Zero(2, 3), g), cdrop::StateError);
  }

  SUBCASE("zero upstream gradient zeroes the p_logit gradient") {
    ConcreteDropoutLayer layer(d, 0.2);
    const Matrix x = cdrop::gaussian(rng, 5, 4);
    layer.forward(x, rng);
    LayerGrads g;
    layer.backward(Matrix::Zero(5, 3), g);
    CHECK(g.dp_logit == 0.0);
    CHECK(g.dW.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("input gradient at p_logit = -20 matches the dense-layer gradient") {
    ConcreteDropoutLayer layer(d, -20.0);
    ConcreteDropoutLayer plain(d, 0.0);
    plain.dropout_enabled = false;
    const Matrix x = cdrop::gaussian(rng, 5, 4);
    const Matrix c = cdrop::gaussian(rng, 5, 3);
    layer.forward(x, rng);
    plain.forward(x, rng);
    LayerGrads ga, gb;
    const Matrix dxa = layer.backward(c, ga);
    const Matrix dxb = plain.backward(c, gb);
    CHECK((dxa - dxb).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("mlp construction, parameter packing and head split") {
  RngStream rng(51);
  MlpConfig cfg;
  cfg.input_dim = 3;
  cfg.hidden = {5, 4};
  cfg.output_dim = 2;
  cfg.heteroscedastic = true;
  Mlp model = Mlp::build(cfg, rng);

  REQUIRE(model.layers.size() == 3);
  CHECK(model.layers[0].inner.W.rows() == 5);
  CHECK(model.layers[0].inner.W.cols() == 3);
  CHECK(model.layers[1].inner.W.rows() == 4);
  CHECK(model.layers[2].inner.W.rows() == 4);  // 2*output_dim head
  CHECK(model.layers[2].inner.activation == Activation::identity);
  CHECK(model.layers[0].inner.activation == Activation::relu);
  for (const auto& layer : model.layers) {
    CHECK(layer.p_logit >= -2.0);
    CHECK(layer.p_logit <= 0.0);
  }

  // Same seed rebuilds the same model.
  RngStream rng2(51);
  Mlp twin = Mlp::build(cfg, rng2);
  CHECK(model.get_params() == twin.get_params());

  // Flat round-trip.
  Vector theta = model.get_params();
  CHECK(theta.size() == model.param_count());
  theta[0] += 1.5;
  theta[theta.size() - 1] = -0.75;  // last slot is the head's p_logit
  model.set_params(theta);
  CHECK(model.get_params() == theta);
  CHECK(model.layers[2].p_logit == -0.75);

  const auto groups = model.param_groups();
  REQUIRE(groups.size() == 9);
  CHECK(groups[0].name == "layer0.W");
  CHECK(groups[2].name == "layer0.p_logit");
  Eigen::Index total = 0;
  for (const auto& g : groups) {
    CHECK(g.offset == total);
    total += g.size;
  }
  CHECK(total == model.param_count());

  const Matrix x = cdrop::gaussian(rng, 7, 3);
  const Matrix out = model.forward(x, rng);
  REQUIRE(out.cols() == 4);
  CHECK(model.mean_of(out) == out.leftCols(2));
  CHECK(model.log_var_of(out) == out.rightCols(2));

  MlpConfig homo = cfg;
  homo.heteroscedastic = false;
  Mlp hm = Mlp::build(homo, rng);
  const Matrix hout = hm.forward(x, rng);
  CHECK(hout.cols() == 2);
  CHECK_THROWS_AS(hm.log_var_of(hout), cdrop::StateError);
}

TEST_CASE("mlp backward chains layer gradients (finite-difference spot check)") {
  RngStream rng(61);
  MlpConfig cfg;
  cfg.input_dim = 2;
  cfg.hidden = {4};
  cfg.output_dim = 1;
  Mlp model = Mlp::build(cfg, rng);
  const Matrix x = cdrop::gaussian(rng, 3, 2);
  const RngStream frozen = rng;

  auto loss_at = [&](const Vector& theta) {
    Mlp m = model;
    m.set_params(theta);
    RngStream r = frozen;
    return cdrop::sum(m.forward(x, r));
  };

  RngStream r = frozen;
  Mlp work = model;
  const Matrix out = work.forward(x, r);
  auto grads = cdrop::make_zero_grads(work);
  work.backward(Matrix::Ones(out.rows(), out.cols()), grads);
  const Vector g = work.flatten(grads);

  const Vector theta = model.get_params();
  const double h = 1e-5;
  for (Eigen::Index k = 0; k < theta.size(); k += 3) {  // spot-check stride
    Vector tp = theta, tm = theta;
    tp[k] += h;
    tm[k] -= h;
    const double fd = (loss_at(tp) - loss_at(tm)) / (2 * h);
    CHECK(std::abs(g[k] - fd) / std::max({std::abs(g[k]), std::abs(fd), 1e-6}) <
          1e-4);
  }
}
