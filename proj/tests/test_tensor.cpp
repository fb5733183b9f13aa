#include <doctest.h>

#include <cmath>
#include <limits>

#include "cdrop/tensor.hpp"

using cdrop::Matrix;
using cdrop::Vector;

namespace {

// Naive triple loop, the reference for matmul.
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
  Matrix c = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index k = 0; k < a.cols(); ++k) c(i, j) += a(i, k) * b(k, j);
  return c;
}

}  // namespace

TEST_CASE("matmul matches the naive triple loop") {
  Matrix a(2, 3), b(3, 4);
  a << 1.5, -2.0, 0.25, 3.0, 4.0, -1.0;
  b << 0.5, 1.0, -1.5, 2.0, 2.5, -0.5, 1.0, 0.0, -3.0, 1.5, 0.5, 2.0;
  const Matrix c = cdrop::matmul(a, b);
  const Matrix ref = matmul_oracle(a, b);
  REQUIRE(c.rows() == 2);
  REQUIRE(c.cols() == 4);
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      CHECK(c(i, j) == doctest::Approx(ref(i, j)).epsilon(1e-14));
}

TEST_CASE("matmul rejects mismatched inner dimensions, naming both shapes") {
  const Matrix a = Matrix::Zero(2, 3);
  const Matrix b = Matrix::Zero(4, 5);
  try {
    cdrop::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const cdrop::DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("sequential reductions match hand values") {
  Matrix m(2, 2);
  m << 1.0, 2.0, 3.0, 4.0;
  CHECK(cdrop::sum(m) == 10.0);
  CHECK(cdrop::mean(m) == 2.5);
  // population variance: mean 2.5, squared devs {2.25, 0.25, 0.25, 2.25}
  CHECK(cdrop::population_variance(m) == doctest::Approx(1.25).epsilon(1e-15));

  Vector v(2);
  v << 1.0, 3.0;
  CHECK(cdrop::population_variance(v) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cdrop::population_variance(Vector::Constant(7, 3.125)) == 0.0);
}

TEST_CASE("sum accumulates in row-major order") {
  // Ordering is observable through floating-point non-associativity.
  Matrix m(2, 2);
  m << 1e16, 1.0, 1.0, -1e16;
  double acc = 0.0;
  acc += 1e16;
  acc += 1.0;
  acc += 1.0;
  acc += -1e16;
  CHECK(cdrop::sum(m) == acc);
}

TEST_CASE("reductions reject empty input") {
  const Matrix e(0, 3);
  CHECK_THROWS_AS(cdrop::mean(e), cdrop::ArgumentError);
  CHECK_THROWS_AS(cdrop::population_variance(e), cdrop::ArgumentError);
}

TEST_CASE("all_finite flags NaN and infinity") {
  Matrix m = Matrix::Ones(2, 2);
  CHECK(cdrop::all_finite(m));
  m(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(cdrop::all_finite(m));
  m(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_FALSE(cdrop::all_finite(m));
}
