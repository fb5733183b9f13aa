#include "cdrop/data.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cdrop/errors.hpp"

namespace cdrop {

Dataset synth_generate(Eigen::Index n, std::uint64_t seed, double x_lo,
                       double x_hi, double noise_std) {
  if (n < 1) throw ArgumentError("synth_generate: n must be >= 1, got " + std::to_string(n));
  if (!(x_hi > x_lo))
    throw ArgumentError("synth_generate: x range [" + std::to_string(x_lo) + ", " +
                        std::to_string(x_hi) + "] is empty");
  RngStream rng(seed);
  Dataset d;
  d.X = Matrix(n, 1);
  d.Y = Matrix(n, 1);
  // Per-row draw order (x, then noise) keeps row i identical whatever n is.
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = x_lo + (x_hi - x_lo) * rng.next_uniform();
    d.X(i, 0) = x;
    d.Y(i, 0) = 2.0 * x + 8.0 + rng.next_gaussian(0.0, noise_std);
  }
  d.feature_names = {"x"};
  return d;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, delim)) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == delim) cells.push_back("");
  return cells;
}

double parse_cell(const std::string& cell, std::size_t row,
                  const std::string& column) {
  double value = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last)
    throw DataError("csv row " + std::to_string(row) + ", column '" + column +
                    "': non-numeric cell '" + cell + "'");
  return value;
}

}  // namespace

Dataset load_csv(const std::string& path, const std::string& target_column,
                 char delimiter) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open csv file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw DataError("csv file '" + path + "' is empty");
  const std::vector<std::string> header = split_line(line, delimiter);

  std::size_t target_idx = header.size();
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == target_column) target_idx = j;
  if (target_idx == header.size())
    throw DataError("csv target column '" + target_column + "' not found in '" +
                    path + "'");

  std::vector<std::vector<double>> rows;
  std::size_t row_no = 0;  // 1-based over data rows
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row_no;
    const std::vector<std::string> cells = split_line(line, delimiter);
    if (cells.size() != header.size())
      throw DataError("csv row " + std::to_string(row_no) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(header.size()));
    std::vector<double> parsed(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j)
      parsed[j] = parse_cell(cells[j], row_no, header[j]);
    rows.push_back(std::move(parsed));
  }
  if (rows.empty()) throw DataError("csv file '" + path + "' has no data rows");

  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index d = static_cast<Eigen::Index>(header.size()) - 1;
  Dataset out;
  out.X = Matrix(n, d);
  out.Y = Matrix(n, 1);
  for (std::size_t j = 0; j < header.size(); ++j)
    if (j != target_idx) out.feature_names.push_back(header[j]);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index col = 0;
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (j == target_idx)
        out.Y(i, 0) = rows[static_cast<std::size_t>(i)][j];
      else
        out.X(i, col++) = rows[static_cast<std::size_t>(i)][j];
    }
  }
  return out;
}

namespace {

std::uint32_t read_u32_be(std::ifstream& in, const std::string& path,
                          const char* what) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4))
    throw FormatError("idx file '" + path + "' truncated while reading " + what);
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

std::vector<unsigned char> read_payload(std::ifstream& in, const std::string& path,
                                        std::size_t expected) {
  std::vector<unsigned char> bytes(expected);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
  const std::size_t got = static_cast<std::size_t>(in.gcount());
  if (got != expected)
    throw FormatError("idx file '" + path + "' truncated: expected " +
                      std::to_string(expected) + " payload bytes, got " +
                      std::to_string(got));
  return bytes;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot open idx file '" + images_path + "'");
  const std::uint32_t img_magic = read_u32_be(img, images_path, "magic");
  if (img_magic != 2051u)
    throw FormatError("idx file '" + images_path + "' has magic " +
                      std::to_string(img_magic) + ", expected 2051");
  const std::uint32_t n_images = read_u32_be(img, images_path, "image count");
  const std::uint32_t n_rows = read_u32_be(img, images_path, "row count");
  const std::uint32_t n_cols = read_u32_be(img, images_path, "column count");
  const std::size_t pixels =
      std::size_t(n_images) * std::size_t(n_rows) * std::size_t(n_cols);
  const std::vector<unsigned char> img_bytes = read_payload(img, images_path, pixels);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("cannot open idx file '" + labels_path + "'");
  const std::uint32_t lab_magic = read_u32_be(lab, labels_path, "magic");
  if (lab_magic != 2049u)
    throw FormatError("idx file '" + labels_path + "' has magic " +
                      std::to_string(lab_magic) + ", expected 2049");
  const std::uint32_t n_labels = read_u32_be(lab, labels_path, "label count");
  const std::vector<unsigned char> lab_bytes = read_payload(lab, labels_path, n_labels);

  if (n_images != n_labels)
    throw FormatError("idx count mismatch: " + std::to_string(n_images) +
                      " images vs " + std::to_string(n_labels) + " labels");

  Dataset d;
  const Eigen::Index n = static_cast<Eigen::Index>(n_images);
  const Eigen::Index dim = static_cast<Eigen::Index>(n_rows) *
                           static_cast<Eigen::Index>(n_cols);
  d.X = Matrix(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < dim; ++j)
      d.X(i, j) =
          double(img_bytes[static_cast<std::size_t>(i * dim + j)]) / 255.0;
  d.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    d.labels[static_cast<std::size_t>(i)] = int(lab_bytes[static_cast<std::size_t>(i)]);
  return d;
}

namespace {

Dataset take_rows(const Dataset& d, const std::vector<Eigen::Index>& order,
                  Eigen::Index begin, Eigen::Index count) {
  Dataset out;
  out.feature_names = d.feature_names;
  out.X = Matrix(count, d.X.cols());
  if (d.classification())
    out.labels.resize(static_cast<std::size_t>(count));
  else
    out.Y = Matrix(count, d.Y.cols());
  for (Eigen::Index i = 0; i < count; ++i) {
    const Eigen::Index src = order[static_cast<std::size_t>(begin + i)];
    out.X.row(i) = d.X.row(src);
    if (d.classification())
      out.labels[static_cast<std::size_t>(i)] = d.labels[static_cast<std::size_t>(src)];
    else
      out.Y.row(i) = d.Y.row(src);
  }
  return out;
}

}  // namespace

SplitResult split(const Dataset& data, double train_frac, double val_frac,
                  double test_frac, std::uint64_t seed) {
  const double fracs[3] = {train_frac, val_frac, test_frac};
  for (double f : fracs)
    if (f < 0.0 || f > 1.0)
      throw ArgumentError("split: fraction " + std::to_string(f) +
                          " outside [0, 1]");
  const double total = train_frac + val_frac + test_frac;
  if (std::abs(total - 1.0) > 1e-9)
    throw ArgumentError("split: fractions sum to " + std::to_string(total) +
                        ", expected 1");

  const Eigen::Index n = data.size();
  Eigen::Index counts[3];
  for (int k = 0; k < 3; ++k)
    counts[k] = static_cast<Eigen::Index>(fracs[k] * static_cast<double>(n));
  // Flooring can leave rows unassigned; the train split absorbs them so the
  // partition stays exhaustive.
  counts[0] += n - (counts[0] + counts[1] + counts[2]);
  const char* names[3] = {"train", "val", "test"};
  for (int k = 0; k < 3; ++k)
    if (fracs[k] > 0.0 && counts[k] == 0)
      throw DataError("split: " + std::string(names[k]) + " fraction " +
                      std::to_string(fracs[k]) + " yields an empty split at n = " +
                      std::to_string(n));

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  RngStream rng(seed);
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    const Eigen::Index j =
        i + static_cast<Eigen::Index>(rng.next_u64() %
                                      static_cast<std::uint64_t>(n - i));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }

  SplitResult out;
  out.train = take_rows(data, order, 0, counts[0]);
  out.val = take_rows(data, order, counts[0], counts[1]);
  out.test = take_rows(data, order, counts[0] + counts[1], counts[2]);
  return out;
}

Normalisation fit_normalisation(const Matrix& x) {
  if (x.rows() < 1) throw ArgumentError("fit_normalisation: empty matrix");
  Normalisation n;
  n.mean = Vector(x.cols());
  n.std = Vector(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    double m = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) m += x(i, j);
    m /= static_cast<double>(x.rows());
    double v = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double r = x(i, j) - m;
      v += r * r;
    }
    v /= static_cast<double>(x.rows());
    n.mean(j) = m;
    n.std(j) = v > 0.0 ? std::sqrt(v) : 1.0;
  }
  return n;
}

namespace {

void check_norm_dims(const Matrix& x, const Normalisation& n, const char* fn) {
  if (x.cols() != n.mean.size() || n.mean.size() != n.std.size())
    throw DimensionError(std::string(fn) + ": matrix has " +
                         std::to_string(x.cols()) + " columns, stats have " +
                         std::to_string(n.mean.size()));
}

}  // namespace

Matrix apply_normalisation(const Matrix& x, const Normalisation& n) {
  check_norm_dims(x, n, "apply_normalisation");
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out(i, j) = (x(i, j) - n.mean(j)) / n.std(j);
  return out;
}

Matrix invert_normalisation(const Matrix& x, const Normalisation& n) {
  check_norm_dims(x, n, "invert_normalisation");
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out(i, j) = x(i, j) * n.std(j) + n.mean(j);
  return out;
}

}  // namespace cdrop
