#pragma once

// Shared generators for randomized tests. Deterministic: every test seeds
// its own Rng explicitly.

#include <cstdint>
#include <random>
#include <vector>

#include "stvg/core.hpp"

namespace testutil {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  std::int64_t integer(std::int64_t lo, std::int64_t hi) {  // inclusive
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
  }

  bool chance(double p) { return uniform() < p; }

  std::mt19937_64& gen() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

inline stvg::BoundingBox random_box(Rng& rng, double width, double height) {
  const double x0 = rng.uniform(0.0, width - 1.0);
  const double y0 = rng.uniform(0.0, height - 1.0);
  const double x1 = rng.uniform(x0 + 0.5, width);
  const double y1 = rng.uniform(y0 + 0.5, height);
  return stvg::BoundingBox{x0, y0, x1, y1};
}

inline stvg::GroundingAttentionMap random_map(Rng& rng, std::size_t t, std::size_t h,
                                              std::size_t w, double lo = 0.0,
                                              double hi = 1.0) {
  stvg::GroundingAttentionMap map;
  map.grid = stvg::GridShape{t, h, w};
  map.values.resize(map.grid.cells());
  for (double& v : map.values) v = rng.uniform(lo, hi);
  return map;
}

/// Proposal visible on every frame, one random box per frame.
inline stvg::TrackProposal random_proposal(Rng& rng, std::size_t t_frames, double width,
                                           double height, const std::string& id) {
  stvg::TrackProposal p;
  p.track_id = id;
  for (std::size_t t = 0; t < t_frames; ++t)
    p.boxes.push_back(random_box(rng, width, height));
  return p;
}

inline stvg::Tube random_tube(Rng& rng, std::size_t t_frames, double width, double height) {
  stvg::Tube tube;
  tube.t_s = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(t_frames) - 1));
  tube.t_e = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(tube.t_s), static_cast<std::int64_t>(t_frames) - 1));
  for (std::size_t t = tube.t_s; t <= tube.t_e; ++t)
    tube.boxes.push_back(random_box(rng, width, height));
  return tube;
}

}  // namespace testutil
