#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cdrop/data.hpp"
#include "cdrop/errors.hpp"
#include "doctest.h"

using namespace cdrop;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void push_u32_be(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows,
                                      std::uint32_t cols,
                                      const std::vector<unsigned char>& pixels,
                                      std::uint32_t magic = 2051) {
  std::vector<unsigned char> v;
  push_u32_be(v, magic);
  push_u32_be(v, n);
  push_u32_be(v, rows);
  push_u32_be(v, cols);
  v.insert(v.end(), pixels.begin(), pixels.end());
  return v;
}

std::vector<unsigned char> idx_labels(std::uint32_t n,
                                      const std::vector<unsigned char>& labels,
                                      std::uint32_t magic = 2049) {
  std::vector<unsigned char> v;
  push_u32_be(v, magic);
  push_u32_be(v, n);
  v.insert(v.end(), labels.begin(), labels.end());
  return v;
}

}  // namespace

TEST_CASE("synthetic generator draws x in range and y on the noisy line") {
  const Dataset d = synth_generate(500, 11);
  REQUIRE(d.X.rows() == 500);
  REQUIRE(d.X.cols() == 1);
  REQUIRE(d.Y.cols() == 1);
  CHECK(!d.classification());
  for (Eigen::Index i = 0; i < d.X.rows(); ++i) {
    CHECK(d.X(i, 0) > -1.0);
    CHECK(d.X(i, 0) < 1.0);
  }
}

TEST_CASE("zero noise puts every point exactly on y = 2x + 8") {
  const Dataset d = synth_generate(64, 3, -1.0, 1.0, 0.0);
  for (Eigen::Index i = 0; i < 64; ++i)
    CHECK(d.Y(i, 0) == 2.0 * d.X(i, 0) + 8.0);
}

TEST_CASE("residual moments match the unit-noise model at n = 1e4") {
  const Dataset d = synth_generate(10000, 77);
  Matrix resid = d.Y - (2.0 * d.X + Matrix::Constant(10000, 1, 8.0));
  CHECK(std::abs(mean(resid)) < 0.03);
  const double sd = std::sqrt(population_variance(resid));
  CHECK(sd > 0.97);
  CHECK(sd < 1.03);
}

TEST_CASE("same seed reproduces the dataset; prefixes agree across sizes") {
  const Dataset a = synth_generate(100, 5);
  const Dataset b = synth_generate(100, 5);
  CHECK(a.X == b.X);
  CHECK(a.Y == b.Y);
  // Per-row draw order means a shorter run is a prefix of a longer one.
  const Dataset c = synth_generate(10, 5);
  CHECK(c.X == a.X.topRows(10));
  CHECK(c.Y == a.Y.topRows(10));
  const Dataset e = synth_generate(100, 6);
  CHECK(e.X != a.X);
}

TEST_CASE("synthetic generator rejects bad arguments") {
  CHECK_THROWS_AS(synth_generate(0, 1), ArgumentError);
  CHECK_THROWS_AS(synth_generate(10, 1, 1.0, -1.0), ArgumentError);
  CHECK_THROWS_AS(synth_generate(10, 1, 0.0, 0.0), ArgumentError);
}

TEST_CASE("csv loader reads a hand-written table exactly") {
  const std::string path = temp_path("cdrop_test_basic.csv");
  write_file(path,
             "x1,x2,y\n"
             "1.5,-2,4\n"
             "0.25,3.5,-1\n"
             "-0.125,0,2.5\n");
  const Dataset d = load_csv(path, "y");
  REQUIRE(d.X.rows() == 3);
  REQUIRE(d.X.cols() == 2);
  REQUIRE(d.Y.rows() == 3);
  CHECK(d.X(0, 0) == 1.5);
  CHECK(d.X(0, 1) == -2.0);
  CHECK(d.X(1, 0) == 0.25);
  CHECK(d.X(1, 1) == 3.5);
  CHECK(d.X(2, 0) == -0.125);
  CHECK(d.X(2, 1) == 0.0);
  CHECK(d.Y(0, 0) == 4.0);
  CHECK(d.Y(1, 0) == -1.0);
  CHECK(d.Y(2, 0) == 2.5);
  REQUIRE(d.feature_names.size() == 2);
  CHECK(d.feature_names[0] == "x1");
  CHECK(d.feature_names[1] == "x2");
  std::filesystem::remove(path);
}

TEST_CASE("csv loader takes the target from the middle and honours delimiters") {
  const std::string path = temp_path("cdrop_test_semicolon.csv");
  write_file(path,
             "a;y;b\n"
             "1;10;2\n"
             "3;20;4\n");
  const Dataset d = load_csv(path, "y", ';');
  CHECK(d.X(0, 0) == 1.0);
  CHECK(d.X(0, 1) == 2.0);
  CHECK(d.X(1, 0) == 3.0);
  CHECK(d.X(1, 1) == 4.0);
  CHECK(d.Y(0, 0) == 10.0);
  CHECK(d.Y(1, 0) == 20.0);
  CHECK(d.feature_names == std::vector<std::string>{"a", "b"});
  std::filesystem::remove(path);
}

TEST_CASE("csv errors name the offending row and column") {
  const std::string path = temp_path("cdrop_test_bad.csv");

  write_file(path, "x,y\n1,2\n1,oops\n3,4\n");
  CHECK_THROWS_WITH_AS(load_csv(path, "y"),
                       doctest::Contains("row 2"), DataError);
  CHECK_THROWS_WITH_AS(load_csv(path, "y"),
                       doctest::Contains("column 'y'"), DataError);

  write_file(path, "x,y\n1,2\n3\n");
  CHECK_THROWS_WITH_AS(load_csv(path, "y"),
                       doctest::Contains("row 2"), DataError);

  write_file(path, "x,y\n1,2\n");
  CHECK_THROWS_WITH_AS(load_csv(path, "z"),
                       doctest::Contains("'z'"), DataError);

  CHECK_THROWS_AS(load_csv(temp_path("cdrop_no_such_file.csv"), "y"), DataError);

  write_file(path, "x,y\n");
  CHECK_THROWS_AS(load_csv(path, "y"), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("csv round-trips real-valued tensors bit-exactly") {
  const Dataset src = synth_generate(40, 123);
  const std::string path = temp_path("cdrop_test_roundtrip.csv");
  {
    std::FILE* f = std::fopen(path.c_str(), "w");
    REQUIRE(f != nullptr);
    std::fprintf(f, "x,y\n");
    for (Eigen::Index i = 0; i < src.X.rows(); ++i)
      std::fprintf(f, "%.17g,%.17g\n", src.X(i, 0), src.Y(i, 0));
    std::fclose(f);
  }
  const Dataset back = load_csv(path, "y");
  REQUIRE(back.X.rows() == src.X.rows());
  for (Eigen::Index i = 0; i < src.X.rows(); ++i) {
    CHECK(back.X(i, 0) == src.X(i, 0));
    CHECK(back.Y(i, 0) == src.Y(i, 0));
  }
  std::filesystem::remove(path);
}

TEST_CASE("idx pair parses hand-built images and labels") {
  const std::string ip = temp_path("cdrop_test_images.idx");
  const std::string lp = temp_path("cdrop_test_labels.idx");
  const std::vector<unsigned char> pixels = {0, 51, 102, 153, 204, 255, 10, 20};
  write_bytes(ip, idx_images(2, 2, 2, pixels));
  write_bytes(lp, idx_labels(2, {7, 3}));

  const Dataset d = load_idx(ip, lp);
  REQUIRE(d.X.rows() == 2);
  REQUIRE(d.X.cols() == 4);
  CHECK(d.classification());
  CHECK(d.X(0, 0) == 0.0);
  CHECK(d.X(0, 1) == 51.0 / 255.0);
  CHECK(d.X(0, 2) == 102.0 / 255.0);
  CHECK(d.X(0, 3) == 153.0 / 255.0);
  CHECK(d.X(1, 0) == 204.0 / 255.0);
  CHECK(d.X(1, 1) == 1.0);
  CHECK(d.X(1, 2) == 10.0 / 255.0);
  CHECK(d.X(1, 3) == 20.0 / 255.0);
  REQUIRE(d.labels.size() == 2);
  CHECK(d.labels[0] == 7);
  CHECK(d.labels[1] == 3);

  std::filesystem::remove(ip);
  std::filesystem::remove(lp);
}

TEST_CASE("idx parse agrees with an independent byte-level reader") {
  const std::string ip = temp_path("cdrop_test_images_sum.idx");
  const std::string lp = temp_path("cdrop_test_labels_sum.idx");
  std::vector<unsigned char> pixels(3 * 4 * 5);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<unsigned char>((i * 37 + 11) % 256);
  write_bytes(ip, idx_images(3, 4, 5, pixels));
  write_bytes(lp, idx_labels(3, {0, 9, 4}));

  const Dataset d = load_idx(ip, lp);
  REQUIRE(d.X.rows() == 3);
  REQUIRE(d.X.cols() == 20);

  // Oracle: walk the raw file bytes directly, skipping the 16-byte header.
  std::ifstream raw(ip, std::ios::binary);
  std::vector<unsigned char> all((std::istreambuf_iterator<char>(raw)),
                                 std::istreambuf_iterator<char>());
  REQUIRE(all.size() == 16 + pixels.size());
  double oracle_sum = 0.0;
  for (std::size_t i = 16; i < all.size(); ++i) oracle_sum += double(all[i]) / 255.0;
  CHECK(sum(d.X) == oracle_sum);

  std::filesystem::remove(ip);
  std::filesystem::remove(lp);
}

TEST_CASE("idx loader rejects malformed files") {
  const std::string ip = temp_path("cdrop_test_images_bad.idx");
  const std::string lp = temp_path("cdrop_test_labels_bad.idx");
  const std::vector<unsigned char> pixels = {1, 2, 3, 4, 5, 6, 7, 8};
  write_bytes(lp, idx_labels(2, {1, 2}));

  SUBCASE("wrong image magic") {
    write_bytes(ip, idx_images(2, 2, 2, pixels, 2052));
    CHECK_THROWS_WITH_AS(load_idx(ip, lp), doctest::Contains("2052"), FormatError);
  }
  SUBCASE("wrong label magic") {
    write_bytes(ip, idx_images(2, 2, 2, pixels));
    write_bytes(lp, idx_labels(2, {1, 2}, 2050));
    CHECK_THROWS_WITH_AS(load_idx(ip, lp), doctest::Contains("2050"), FormatError);
  }
  SUBCASE("truncated pixel payload") {
    write_bytes(ip, idx_images(2, 2, 2, {1, 2, 3}));
    CHECK_THROWS_WITH_AS(load_idx(ip, lp), doctest::Contains("truncated"),
                         FormatError);
  }
  SUBCASE("truncated header") {
    write_bytes(ip, {0, 0, 8});
    CHECK_THROWS_AS(load_idx(ip, lp), FormatError);
  }
  SUBCASE("image/label count mismatch") {
    write_bytes(ip, idx_images(2, 2, 2, pixels));
    write_bytes(lp, idx_labels(3, {1, 2, 3}));
    CHECK_THROWS_WITH_AS(load_idx(ip, lp), doctest::Contains("mismatch"),
                         FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_idx(temp_path("cdrop_absent.idx"), lp), DataError);
  }

  std::filesystem::remove(ip);
  std::filesystem::remove(lp);
}

TEST_CASE("split with the whole weight on train returns the full set") {
  const Dataset d = synth_generate(25, 9);
  const SplitResult s = split(d, 1.0, 0.0, 0.0, 42);
  CHECK(s.train.size() == 25);
  CHECK(s.val.size() == 0);
  CHECK(s.test.size() == 0);
  // Same rows, shuffled: sorted x columns must match exactly.
  std::vector<double> orig(d.X.data(), d.X.data() + 25);
  std::vector<double> got(s.train.X.data(), s.train.X.data() + 25);
  std::sort(orig.begin(), orig.end());
  std::sort(got.begin(), got.end());
  CHECK(orig == got);
}

TEST_CASE("splits are disjoint, exhaustive, and seed-deterministic") {
  const Dataset d = synth_generate(103, 8);
  for (auto [tf, vf, ef] : {std::tuple{0.8, 0.1, 0.1},
                            std::tuple{0.9, 0.0, 0.1},
                            std::tuple{0.5, 0.25, 0.25}}) {
    const SplitResult s = split(d, tf, vf, ef, 4);
    CHECK(s.train.size() + s.val.size() + s.test.size() == 103);

    // Union as a multiset of (x, y) pairs equals the original.
    std::vector<std::pair<double, double>> orig, got;
    for (Eigen::Index i = 0; i < d.size(); ++i)
      orig.emplace_back(d.X(i, 0), d.Y(i, 0));
    for (const Dataset* part : {&s.train, &s.val, &s.test})
      for (Eigen::Index i = 0; i < part->size(); ++i)
        got.emplace_back(part->X(i, 0), part->Y(i, 0));
    std::sort(orig.begin(), orig.end());
    std::sort(got.begin(), got.end());
    CHECK(orig == got);
  }

  const SplitResult a = split(d, 0.8, 0.1, 0.1, 31);
  const SplitResult b = split(d, 0.8, 0.1, 0.1, 31);
  CHECK(a.train.X == b.train.X);
  CHECK(a.val.X == b.val.X);
  CHECK(a.test.X == b.test.X);
  const SplitResult c = split(d, 0.8, 0.1, 0.1, 32);
  CHECK(a.train.X != c.train.X);
}

TEST_CASE("split carries labels through for classification data") {
  Dataset d;
  d.X = Matrix(6, 2);
  for (Eigen::Index i = 0; i < 6; ++i) {
    d.X(i, 0) = double(i);
    d.X(i, 1) = double(10 * i);
  }
  d.labels = {0, 1, 2, 0, 1, 2};
  const SplitResult s = split(d, 0.5, 0.0, 0.5, 7);
  CHECK(s.train.classification());
  CHECK(s.train.size() == 3);
  CHECK(s.test.size() == 3);
  // Label must still ride with its row: x0 encodes the original index.
  for (const Dataset* part : {&s.train, &s.test})
    for (Eigen::Index i = 0; i < part->size(); ++i) {
      const int orig = static_cast<int>(part->X(i, 0));
      CHECK(part->labels[static_cast<std::size_t>(i)] == orig % 3);
    }
}

TEST_CASE("split rejects bad fractions and empty nonzero splits") {
  const Dataset d = synth_generate(5, 2);
  CHECK_THROWS_AS(split(d, 0.5, 0.1, 0.1, 1), ArgumentError);
  CHECK_THROWS_AS(split(d, -0.2, 0.6, 0.6, 1), ArgumentError);
  // 0.1 of 5 rows floors to zero.
  CHECK_THROWS_AS(split(d, 0.8, 0.1, 0.1, 1), DataError);
}

TEST_CASE("standardisation zeroes means, unit-scales columns, and inverts") {
  const Dataset d = synth_generate(200, 13);
  Matrix joint(200, 2);
  joint.col(0) = d.X.col(0);
  joint.col(1) = d.Y.col(0);
  const Normalisation n = fit_normalisation(joint);
  const Matrix z = apply_normalisation(joint, n);
  for (Eigen::Index j = 0; j < 2; ++j) {
    CHECK(std::abs(mean(z.col(j))) < 1e-12);
    CHECK(population_variance(z.col(j)) == doctest::Approx(1.0).epsilon(1e-10));
  }
  const Matrix back = invert_normalisation(z, n);
  for (Eigen::Index i = 0; i < 200; ++i)
    for (Eigen::Index j = 0; j < 2; ++j)
      CHECK(back(i, j) == doctest::Approx(joint(i, j)).epsilon(1e-12));
}

TEST_CASE("constant features keep unit scale so the transform stays invertible") {
  Matrix x(4, 2);
  x << 3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0;
  const Normalisation n = fit_normalisation(x);
  CHECK(n.mean(0) == 3.0);
  CHECK(n.std(0) == 1.0);
  const Matrix z = apply_normalisation(x, n);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(z(i, 0) == 0.0);
  const Matrix back = invert_normalisation(z, n);
  CHECK(back == x);
}

TEST_CASE("normalisation stats and data must agree on width") {
  Matrix x(3, 2);
  x.setZero();
  const Normalisation n = fit_normalisation(x);
  Matrix wide(3, 4);
  wide.setZero();
  CHECK_THROWS_AS(apply_normalisation(wide, n), DimensionError);
  CHECK_THROWS_AS(invert_normalisation(wide, n), DimensionError);
}
