#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdrop/rng.hpp"
#include "cdrop/tensor.hpp"

namespace cdrop {

struct Dataset {
  Matrix X;                 // N x D features
  Matrix Y;                 // N x D_out regression targets (when not labelled)
  std::vector<int> labels;  // class labels (when labelled)
  std::vector<std::string> feature_names;

  bool classification() const { return !labels.empty(); }
  Eigen::Index size() const { return X.rows(); }
};

// y = 2x + 8 + noise with x ~ U(x_lo, x_hi); deterministic per seed.
Dataset synth_generate(Eigen::Index n, std::uint64_t seed, double x_lo = -1.0,
                       double x_hi = 1.0, double noise_std = 1.0);

// Numeric CSV with a header row; the named column becomes the target.
// Ragged rows, non-numeric cells and a missing target column raise DataError
// naming the offending row/column.
Dataset load_csv(const std::string& path, const std::string& target_column,
                 char delimiter = ',');

// IDX pair: images (magic 2051, u8, [N, rows, cols] scaled into [0,1]) and
// labels (magic 2049, u8). Wrong magic, truncation or a count mismatch raise
// FormatError.
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);

struct SplitResult {
  Dataset train, val, test;
};

// Seed-deterministic shuffled split; fractions must sum to 1. A nonzero
// fraction that rounds to an empty split raises DataError.
SplitResult split(const Dataset& data, double train_frac, double val_frac,
                  double test_frac, std::uint64_t seed);

// Per-feature standardisation. Constant features keep std 1 so the transform
// stays invertible.
struct Normalisation {
  Vector mean, std;
};

Normalisation fit_normalisation(const Matrix& x);
Matrix apply_normalisation(const Matrix& x, const Normalisation& n);
Matrix invert_normalisation(const Matrix& x, const Normalisation& n);

}  // namespace cdrop
