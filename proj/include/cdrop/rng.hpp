#pragma once

#include <cstdint>

#include "cdrop/tensor.hpp"

namespace cdrop {

// Counter-based splittable PRNG: draw i of a stream is a bijective hash of
// base + i*gamma, where base and gamma derive from (seed, stream_id). Streams
// with different ids are decorrelated, and fork() derives fresh child streams
// deterministically.
//
// Value semantics matter: copying an RngStream freezes its position, so a copy
// replays exactly the same draws. Gradient checks use this to evaluate the
// loss repeatedly under identical dropout masks.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

  std::uint64_t next_u64();

  // Uniform draw strictly inside (0, 1); both endpoints are unreachable so
  // downstream logs and logits stay finite.
  double next_uniform();

  // Box-Muller transform of two uniforms. std == 0 returns mean exactly.
  double next_gaussian(double mean = 0.0, double std = 1.0);

  // Child stream that never collides with this stream or its other children.
  RngStream fork();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t base_;
  std::uint64_t gamma_;
  std::uint64_t counter_ = 0;
  std::uint64_t fork_count_ = 0;
};

// Matrices of draws, filled in row-major order.
Matrix uniform(RngStream& rng, Eigen::Index rows, Eigen::Index cols);
Matrix gaussian(RngStream& rng, Eigen::Index rows, Eigen::Index cols,
                double mean = 0.0, double std = 1.0);

}  // namespace cdrop
