#pragma once

// Scoring and joint inference: per-track attention scores, per-frame
// scores, top-K temporal span selection, and tube assembly.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "stvg/core.hpp"

namespace stvg::grounding {

struct TrackScores {
  std::vector<double> scores;  // aligned with the proposal list
};

struct FrameScores {
  std::vector<double> scores;  // one per sampled frame
};

/// s_p = max over all frames and cells of map .* rasterized track mask.
/// Frames where the proposal is hidden contribute nothing.
inline TrackScores track_score(const GroundingAttentionMap& map,
                               const std::vector<TrackProposal>& proposals,
                               double width_px, double height_px) {
  if (proposals.empty()) throw Error("no proposals");
  TrackScores out;
  out.scores.reserve(proposals.size());
  for (const auto& p : proposals) {
    const GridMask mask = rasterize_track(p, width_px, height_px, map.grid);
    double best = 0.0;
    for (std::size_t i = 0; i < map.values.size(); ++i)
      if (mask.values[i]) best = std::max(best, map.values[i]);
    out.scores.push_back(best);
  }
  return out;
}

/// s_t = max over the h x w cells of frame t (full-frame).
inline FrameScores frame_score(const GroundingAttentionMap& map) {
  FrameScores out;
  out.scores.reserve(map.grid.t_frames);
  const std::size_t cells = map.grid.frame_cells();
  for (std::size_t t = 0; t < map.grid.t_frames; ++t) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cells; ++i)
      best = std::max(best, map.values[t * cells + i]);
    out.scores.push_back(best);
  }
  return out;
}

/// Argmax; ties resolved toward the lowest index.
inline std::size_t select_track(const TrackScores& scores) {
  if (scores.scores.empty()) throw Error("no proposals");
  std::size_t best = 0;
  for (std::size_t p = 1; p < scores.scores.size(); ++p)
    if (scores.scores[p] > scores.scores[best]) best = p;
  return best;
}

struct TemporalSpan {
  std::size_t t_s = 0;
  std::size_t t_e = 0;
  std::vector<std::size_t> selected;  // the K top-scoring frames, ascending
};

/// Indices of the k largest frame scores (ties favor earlier frames);
/// the predicted span is their [min, max] hull.
inline TemporalSpan select_temporal_span(const FrameScores& scores, int k) {
  const std::size_t n = scores.scores.size();
  if (k < 1 || static_cast<std::size_t>(k) > n) throw Error("invalid k");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.scores[a] > scores.scores[b];
  });
  TemporalSpan span;
  span.selected.assign(order.begin(), order.begin() + k);
  std::sort(span.selected.begin(), span.selected.end());
  span.t_s = span.selected.front();
  span.t_e = span.selected.back();
  return span;
}

/// Restrict a proposal's boxes to [t_s, t_e]; frames in the span where the
/// proposal is hidden copy the nearest visible in-span frame's box (ties
/// toward the earlier frame).
inline Tube assemble_tube(const TrackProposal& proposal, std::size_t t_s, std::size_t t_e) {
  if (t_s > t_e || t_e >= proposal.boxes.size())
    throw Error("assemble_tube: span out of range");
  bool any = false;
  for (std::size_t t = t_s; t <= t_e; ++t)
    if (proposal.boxes[t]) any = true;
  if (!any) throw Error("empty intersection");

  Tube tube;
  tube.t_s = t_s;
  tube.t_e = t_e;
  for (std::size_t t = t_s; t <= t_e; ++t) {
    if (proposal.boxes[t]) {
      tube.boxes.push_back(*proposal.boxes[t]);
      continue;
    }
    std::size_t best = 0;
    std::size_t best_dist = std::numeric_limits<std::size_t>::max();
    for (std::size_t u = t_s; u <= t_e; ++u) {
      if (!proposal.boxes[u]) continue;
      const std::size_t dist = (u > t) ? u - t : t - u;
      if (dist < best_dist) {
        best_dist = dist;
        best = u;
      }
    }
    tube.boxes.push_back(*proposal.boxes[best]);
  }
  return tube;
}

}  // namespace stvg::grounding
