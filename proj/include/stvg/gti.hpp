#pragma once

// Grounding-token identification: per-token attention maps over the
// visual grid, the inside/outside attention ratio, superior-token and
// activation-rank selection, and the corpus studies behind them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "stvg/core.hpp"
#include "stvg/evalkit.hpp"

namespace stvg::gti {

/// One aggregated map per special token.
struct SpecialTokenAttention {
  std::vector<GroundingAttentionMap> maps;
  std::vector<std::string> token_labels;
};

/// Mean over all layers and heads of each special-token row's attention
/// to the visual span, reshaped onto the (t, h, w) grid.
inline SpecialTokenAttention aggregate_attention(const RawAttention& raw,
                                                 const TokenLayout& layout,
                                                 std::vector<std::string> labels = {}) {
  layout.validate();
  if (raw.tokens != layout.total())
    throw Error("aggregate_attention: layout does not match attention size");
  SpecialTokenAttention sta;
  const double denom = static_cast<double>(raw.layers * raw.heads);
  for (std::size_t r = 0; r < layout.n_role; ++r) {
    const std::size_t row = layout.role_begin() + r;
    GroundingAttentionMap map;
    map.grid = layout.grid;
    map.token_index = static_cast<int>(r);
    map.values.assign(layout.m_visual, 0.0);
    for (std::size_t l = 0; l < raw.layers; ++l)
      for (std::size_t h = 0; h < raw.heads; ++h)
        for (std::size_t m = 0; m < layout.m_visual; ++m)
          map.values[m] += raw.at(l, h, row, layout.visual_begin() + m);
    for (double& v : map.values) v /= denom;
    sta.maps.push_back(std::move(map));
  }
  if (labels.size() == layout.n_role) {
    sta.token_labels = std::move(labels);
  } else {
    for (std::size_t r = 0; r < layout.n_role; ++r)
      sta.token_labels.push_back("<role" + std::to_string(r) + ">");
  }
  return sta;
}

/// Ratio of the maximum attention inside the ground-truth boxes to the
/// maximum outside them, maxima taken jointly over all frames. The
/// denominator is clamped to epsilon so an empty outside region yields a
/// finite, huge ratio.
inline double attention_ratio(const GroundingAttentionMap& map, const Tube& gt,
                              double width_px, double height_px,
                              double epsilon = 1e-12) {
  const GridMask mask = rasterize_tube(gt, width_px, height_px, map.grid);
  double in_max = 0.0;
  double out_max = 0.0;
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    if (mask.values[i])
      in_max = std::max(in_max, map.values[i]);
    else
      out_max = std::max(out_max, map.values[i]);
  }
  return in_max / std::max(out_max, epsilon);
}

/// Token with the highest attention ratio against the ground truth;
/// ties resolved toward the lowest index.
inline std::size_t superior_token(const SpecialTokenAttention& sta, const Tube& gt,
                                  double width_px, double height_px,
                                  double epsilon = 1e-12) {
  if (sta.maps.empty()) throw Error("superior_token: no token maps");
  std::size_t best = 0;
  double best_ratio = attention_ratio(sta.maps[0], gt, width_px, height_px, epsilon);
  for (std::size_t r = 1; r < sta.maps.size(); ++r) {
    const double ratio = attention_ratio(sta.maps[r], gt, width_px, height_px, epsilon);
    if (ratio > best_ratio) {
      best_ratio = ratio;
      best = r;
    }
  }
  return best;
}

/// Ground-truth-free selection: the token whose map has the largest
/// global maximum (its visual activation). Ties go to the lowest index.
inline std::size_t select_grounding_token(const SpecialTokenAttention& sta) {
  if (sta.maps.empty()) throw Error("select_grounding_token: no token maps");
  std::size_t best = 0;
  double best_act = sta.maps[0].global_max();
  for (std::size_t r = 1; r < sta.maps.size(); ++r) {
    const double act = sta.maps[r].global_max();
    if (act > best_act) {
      best_act = act;
      best = r;
    }
  }
  return best;
}

/// Token indices ordered by visual activation, highest first; equal
/// activations keep index order.
inline std::vector<std::size_t> activation_rank(const SpecialTokenAttention& sta) {
  std::vector<std::size_t> order(sta.maps.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sta.maps[a].global_max() > sta.maps[b].global_max();
  });
  return order;
}

struct HitRatioSample {
  SpecialTokenAttention sta;
  Tube gt;
  double width_px = 0.0;
  double height_px = 0.0;
};

/// Frequency with which each token index is the superior token.
inline std::vector<double> hit_ratio_study(const std::vector<HitRatioSample>& samples,
                                           double epsilon = 1e-12) {
  if (samples.empty()) throw Error("no samples");
  const std::size_t n_role = samples.front().sta.maps.size();
  std::vector<double> freq(n_role, 0.0);
  for (const auto& s : samples) {
    if (s.sta.maps.size() != n_role)
      throw Error("hit_ratio_study: inconsistent token counts");
    freq[superior_token(s.sta, s.gt, s.width_px, s.height_px, epsilon)] += 1.0;
  }
  for (double& f : freq) f /= static_cast<double>(samples.size());
  return freq;
}

struct RankAccuracySample {
  SpecialTokenAttention sta;
  std::vector<TrackProposal> proposals;
  Tube gt;
  double width_px = 0.0;
  double height_px = 0.0;
};

/// For each activation rank r: the fraction of samples where the rank-r
/// token's top-attention proposal overlaps the ground truth with mean
/// IoU >= 0.5 across the gt span.
inline std::vector<double> rank_accuracy_study(const std::vector<RankAccuracySample>& samples,
                                               double iou_threshold = 0.5) {
  if (samples.empty()) throw Error("no samples");
  const std::size_t n_role = samples.front().sta.maps.size();
  std::vector<double> acc(n_role, 0.0);
  for (const auto& s : samples) {
    if (s.sta.maps.size() != n_role)
      throw Error("rank_accuracy_study: inconsistent token counts");
    if (s.proposals.empty()) throw Error("rank_accuracy_study: sample without proposals");
    const auto order = activation_rank(s.sta);
    for (std::size_t rank = 0; rank < n_role; ++rank) {
      const GroundingAttentionMap& map = s.sta.maps[order[rank]];
      // Top-attention proposal under this token's map.
      std::size_t best_p = 0;
      double best_score = -1.0;
      for (std::size_t p = 0; p < s.proposals.size(); ++p) {
        const GridMask mask = rasterize_track(s.proposals[p], s.width_px, s.height_px, map.grid);
        double score = 0.0;
        for (std::size_t i = 0; i < map.values.size(); ++i)
          if (mask.values[i]) score = std::max(score, map.values[i]);
        if (score > best_score) {
          best_score = score;
          best_p = p;
        }
      }
      if (evalkit::mean_track_iou(s.proposals[best_p], s.gt) >= iou_threshold)
        acc[rank] += 1.0;
    }
  }
  for (double& a : acc) a /= static_cast<double>(samples.size());
  return acc;
}

struct GtiReport {
  std::vector<double> hit_ratio;       // per token index
  std::vector<double> rank_accuracy;   // per activation rank
  std::vector<std::string> token_labels;

  void validate() const {
    double total = 0.0;
    for (double f : hit_ratio) total += f;
    if (!hit_ratio.empty() && std::abs(total - 1.0) > 1e-9)
      throw Error("GtiReport: hit ratios must sum to 1");
    for (double a : rank_accuracy)
      if (a < 0.0 || a > 1.0) throw Error("GtiReport: accuracy outside [0,1]");
  }
};

}  // namespace stvg::gti
