#pragma once

// Temporal-augmented assembling: frame-level reversal, temporal
// consistency scoring between the original and reversed spatial maps,
// assembly of the two maps, and the consistency-vs-accuracy study.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "stvg/backend.hpp"
#include "stvg/core.hpp"
#include "stvg/evalkit.hpp"

namespace stvg::tas {

/// Reverse the frame order of any frame-blocked flat array in place.
inline void reverse_frame_blocks(std::vector<double>& values, std::size_t frames,
                                 std::size_t block) {
  if (values.size() != frames * block)
    throw Error("reverse_frames: size is not frames * block");
  for (std::size_t t = 0; t < frames / 2; ++t) {
    const std::size_t a = t * block;
    const std::size_t b = (frames - 1 - t) * block;
    for (std::size_t i = 0; i < block; ++i) std::swap(values[a + i], values[b + i]);
  }
}

inline GroundingAttentionMap reverse_frames(GroundingAttentionMap map) {
  reverse_frame_blocks(map.values, map.grid.t_frames, map.grid.frame_cells());
  return map;
}

/// Reverse a latent prompt's frame blocks; the frame axis of the visual
/// span is m_visual / frame_cells frames of frame_cells rows each.
inline LatentPrompt reverse_frames(LatentPrompt latent, std::size_t frame_cells) {
  if (frame_cells == 0 || latent.m_visual % frame_cells != 0)
    throw Error("reverse_frames: latent rows are not a whole number of frames");
  reverse_frame_blocks(latent.values, latent.m_visual / frame_cells,
                       frame_cells * latent.embed_dim);
  return latent;
}

struct ConsistencyScore {
  double value = 0.0;
  std::vector<double> per_proposal;
};

/// Eq-style temporal consistency: for each proposal, the max over cells of
/// the product of the two masked maps; the score is the max over
/// proposals. `aligned_reversed` must already be back in original frame
/// order so cells correspond.
inline ConsistencyScore consistency_score(const GroundingAttentionMap& original,
                                          const GroundingAttentionMap& aligned_reversed,
                                          const std::vector<TrackProposal>& proposals,
                                          double width_px, double height_px) {
  if (!(original.grid == aligned_reversed.grid))
    throw Error("consistency_score: map shapes disagree");
  if (proposals.empty()) throw Error("no proposals");
  ConsistencyScore out;
  out.per_proposal.reserve(proposals.size());
  for (const auto& p : proposals) {
    const GridMask mask = rasterize_track(p, width_px, height_px, original.grid);
    double best = 0.0;
    for (std::size_t i = 0; i < original.values.size(); ++i)
      if (mask.values[i])
        best = std::max(best, original.values[i] * aligned_reversed.values[i]);
    out.per_proposal.push_back(best);
  }
  out.value = *std::max_element(out.per_proposal.begin(), out.per_proposal.end());
  return out;
}

/// Mean of the original map and the re-aligned reversed-run map.
inline GroundingAttentionMap assemble_spatial(const GroundingAttentionMap& original,
                                              const GroundingAttentionMap& reversed_run) {
  if (!(original.grid == reversed_run.grid))
    throw Error("assemble_spatial: map shapes disagree");
  GroundingAttentionMap aligned = reverse_frames(reversed_run);
  GroundingAttentionMap out = original;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = (out.values[i] + aligned.values[i]) / 2.0;
  return out;
}

struct ConsistencySample {
  double consistency = 0.0;
  bool correct = false;  // spatial grounding hit at IoU 0.5
};

struct ConsistencyGroup {
  std::size_t group_index = 0;
  double mean_consistency = 0.0;
  double mean_accuracy = 0.0;
  std::size_t n_samples = 0;
};

/// Sort samples by consistency descending, split into ten near-equal
/// groups (remainder spread from the front), and report each group's mean
/// consistency and accuracy.
inline std::vector<ConsistencyGroup> consistency_accuracy_study(
    std::vector<ConsistencySample> samples) {
  constexpr std::size_t kGroups = 10;
  if (samples.size() < kGroups) throw Error("insufficient samples");
  std::stable_sort(samples.begin(), samples.end(),
                   [](const ConsistencySample& a, const ConsistencySample& b) {
                     return a.consistency > b.consistency;
                   });
  const std::size_t base = samples.size() / kGroups;
  const std::size_t remainder = samples.size() % kGroups;
  std::vector<ConsistencyGroup> groups;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < kGroups; ++g) {
    const std::size_t size = base + (g < remainder ? 1 : 0);
    ConsistencyGroup grp;
    grp.group_index = g;
    grp.n_samples = size;
    for (std::size_t i = 0; i < size; ++i, ++pos) {
      grp.mean_consistency += samples[pos].consistency;
      grp.mean_accuracy += samples[pos].correct ? 1.0 : 0.0;
    }
    grp.mean_consistency /= static_cast<double>(size);
    grp.mean_accuracy /= static_cast<double>(size);
    groups.push_back(grp);
  }
  return groups;
}

}  // namespace stvg::tas
