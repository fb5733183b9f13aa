#include "cdrop/rng.hpp"

#include <cmath>
#include <numbers>

namespace cdrop {
namespace {

// SplitMix64 finaliser (Steele et al.); bijective on u64.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed),
      stream_id_(stream_id),
      base_(mix64(seed ^ mix64(stream_id))),
      gamma_(mix64(stream_id ^ 0xDA3E39CB94B95BDBull) | 1ull) {}

std::uint64_t RngStream::next_u64() { return mix64(base_ + gamma_ * counter_++); }

double RngStream::next_uniform() {
  // Top 53 bits, centred on half-steps: ((k + 0.5) / 2^53) for k in [0, 2^53),
  // so the result lies in (0, 1) with both endpoints unreachable.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::next_gaussian(double mean, double std) {
  if (std < 0.0)
    throw ArgumentError("gaussian: std must be >= 0, got " + std::to_string(std));
  const double u1 = next_uniform();
  const double u2 = next_uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + std * (r * std::cos(2.0 * std::numbers::pi * u2));
}

RngStream RngStream::fork() {
  ++fork_count_;
  // Child id folds together parent identity and fork ordinal; collisions would
  // need a 64-bit hash collision.
  const std::uint64_t child_id =
      mix64(stream_id_ ^ mix64(0x9E6C63D0876A9ull + fork_count_));
  return RngStream(seed_, child_id);
}

Matrix uniform(RngStream& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = rng.next_uniform();
  return out;
}

Matrix gaussian(RngStream& rng, Eigen::Index rows, Eigen::Index cols,
                double mean, double std) {
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      out(i, j) = rng.next_gaussian(mean, std);
  return out;
}

}  // namespace cdrop
