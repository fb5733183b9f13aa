#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "cdrop/errors.hpp"

namespace cdrop {

// All numerics run in 64-bit floats. Matrices are row-major so flat storage
// order matches the file formats and the parameter packing used by the
// optimiser and checkpoints.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <class Derived>
std::string shape_str(const Eigen::MatrixBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

// Matrix product with an explicit inner-dimension check; the error names both
// operand shapes.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a) +
                         " * " + shape_str(b));
  return a * b;
}

// The reductions below accumulate sequentially in row-major storage order so
// results are reproducible across platforms and build flags (no pairwise or
// vectorised re-association).
template <class Derived>
double sum(const Eigen::MatrixBase<Derived>& m) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) acc += m(i, j);
  return acc;
}

template <class Derived>
double mean(const Eigen::MatrixBase<Derived>& m) {
  if (m.size() == 0) throw ArgumentError("mean: empty input");
  return sum(m) / static_cast<double>(m.size());
}

// Population variance (1/count), two-pass for accuracy.
template <class Derived>
double population_variance(const Eigen::MatrixBase<Derived>& m) {
  if (m.size() == 0) throw ArgumentError("population_variance: empty input");
  const double mu = mean(m);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double d = m(i, j) - mu;
      acc += d * d;
    }
  return acc / static_cast<double>(m.size());
}

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (!std::isfinite(m(i, j))) return false;
  return true;
}

}  // namespace cdrop
