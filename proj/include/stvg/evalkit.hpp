#pragma once

// STVG metrics (IoU, vIoU, m_vIoU, vIoU@R), dataset manifest and proposal
// ingestion, and ground-truth resampling onto the sampled-frame axis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stvg/core.hpp"

namespace stvg::evalkit {

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  if (!a.valid() || !b.valid()) throw Error("iou: invalid box");
  const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

/// vIoU = (1/|S_u|) * sum over S_i of IoU(pred box, gt box), where S_i and
/// S_u are the intersection and union of the two frame spans. Zero when
/// the spans are disjoint.
inline double viou(const Tube& pred, const Tube& gt) {
  const std::size_t i_lo = std::max(pred.t_s, gt.t_s);
  const std::size_t i_hi = std::min(pred.t_e, gt.t_e);
  const std::size_t s_u = pred.span_length() + gt.span_length() -
                          (i_lo <= i_hi ? i_hi - i_lo + 1 : 0);
  if (i_lo > i_hi) return 0.0;
  double sum = 0.0;
  for (std::size_t t = i_lo; t <= i_hi; ++t) sum += iou(pred.box_at(t), gt.box_at(t));
  return sum / static_cast<double>(s_u);
}

/// Mean per-frame IoU between a proposal and a ground-truth tube over the
/// gt span; frames where the proposal is hidden count as zero overlap.
inline double mean_track_iou(const TrackProposal& track, const Tube& gt) {
  double sum = 0.0;
  for (std::size_t t = gt.t_s; t <= gt.t_e; ++t) {
    if (t < track.boxes.size() && track.boxes[t])
      sum += iou(*track.boxes[t], gt.box_at(t));
  }
  return sum / static_cast<double>(gt.span_length());
}

struct EvalSummary {
  double m_viou = 0.0;
  std::map<double, double> viou_at;  // threshold -> fraction with vIoU > thr
  std::vector<std::pair<std::string, double>> per_sample;
};

/// Mean vIoU plus strict-greater-than fractions per threshold.
inline EvalSummary summarize(std::vector<std::pair<std::string, double>> per_sample,
                             const std::vector<double>& thresholds = {0.3, 0.5}) {
  if (per_sample.empty()) throw Error("no samples");
  EvalSummary s;
  double sum = 0.0;
  for (const auto& [id, v] : per_sample) sum += v;
  s.m_viou = sum / static_cast<double>(per_sample.size());
  for (double thr : thresholds) {
    std::size_t hits = 0;
    for (const auto& [id, v] : per_sample)
      if (v > thr) ++hits;
    s.viou_at[thr] = static_cast<double>(hits) / static_cast<double>(per_sample.size());
  }
  s.per_sample = std::move(per_sample);
  return s;
}

// ---------------------------------------------------------------------------
// Dataset manifest / proposal ingestion
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string clip_id;
  std::int64_t source_frames = 0;
  std::int64_t width_px = 0;
  std::int64_t height_px = 0;
  QueryRecord query;
  std::optional<Tube> gt_source;  // on the source-frame axis
  std::string proposals_path;     // relative to the manifest directory
};

struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;
};

namespace detail {

inline BoundingBox parse_box(const nlohmann::json& j, const std::string& where,
                             double width_px, double height_px,
                             std::vector<std::string>* warnings) {
  if (!j.is_array() || j.size() != 4)
    throw Error(where + ": expected [x_min, y_min, x_max, y_max]");
  BoundingBox b{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
                j.at(3).get<double>()};
  if (b.x_min >= b.x_max)
    throw Error(where + ": reversed x coordinates (x_min >= x_max)");
  if (b.y_min >= b.y_max)
    throw Error(where + ": reversed y coordinates (y_min >= y_max)");
  const BoundingBox clipped{std::max(b.x_min, 0.0), std::max(b.y_min, 0.0),
                            std::min(b.x_max, width_px), std::min(b.y_max, height_px)};
  if (!(clipped == b)) {
    if (!clipped.valid()) throw Error(where + ": box entirely outside frame bounds");
    if (warnings) warnings->push_back(where + ": box clipped to frame bounds");
    return clipped;
  }
  return b;
}

}  // namespace detail

inline DatasetManifest load_manifest(const std::filesystem::path& path,
                                     std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("manifest: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("manifest: " + std::string(e.what()));
  }

  DatasetManifest m;
  m.base_dir = path.parent_path();
  if (!j.contains("entries") || !j["entries"].is_array())
    throw Error("manifest: missing 'entries' array");

  std::size_t idx = 0;
  std::vector<std::string> seen_ids;
  for (const auto& je : j["entries"]) {
    const std::string where = "entries[" + std::to_string(idx) + "]";
    ManifestEntry e;
    try {
      e.clip_id = je.at("clip_id").get<std::string>();
      e.source_frames = je.at("frames").get<std::int64_t>();
      e.width_px = je.at("width").get<std::int64_t>();
      e.height_px = je.at("height").get<std::int64_t>();
      const auto& q = je.at("query");
      e.query.query_id = q.at("id").get<std::string>();
      e.query.text = q.at("text").get<std::string>();
      e.proposals_path = je.at("proposals").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw Error("manifest: " + where + ": " + ex.what());
    }
    if (e.source_frames < 1) throw Error("manifest: " + where + ".frames must be >= 1");
    if (e.width_px <= 0 || e.height_px <= 0)
      throw Error("manifest: " + where + ": frame dimensions must be positive");
    e.query.validate();
    if (std::find(seen_ids.begin(), seen_ids.end(), e.clip_id) != seen_ids.end())
      throw Error("manifest: duplicate clip_id '" + e.clip_id + "'");
    seen_ids.push_back(e.clip_id);

    if (je.contains("gt")) {
      const auto& jg = je.at("gt");
      Tube gt;
      gt.t_s = jg.at("t_s").get<std::size_t>();
      gt.t_e = jg.at("t_e").get<std::size_t>();
      const auto& boxes = jg.at("boxes");
      if (!boxes.is_array() || boxes.size() != gt.t_e - gt.t_s + 1)
        throw Error("manifest: " + where + ".gt.boxes: expected one box per frame in span");
      for (std::size_t b = 0; b < boxes.size(); ++b)
        gt.boxes.push_back(detail::parse_box(
            boxes.at(b), where + ".gt.boxes[" + std::to_string(b) + "]",
            static_cast<double>(e.width_px), static_cast<double>(e.height_px), warnings));
      gt.validate(static_cast<std::size_t>(e.source_frames));
      e.gt_source = std::move(gt);
    }

    if (!std::filesystem::exists(m.base_dir / e.proposals_path))
      throw Error("manifest: " + where + ".proposals: file not found: " + e.proposals_path);
    m.entries.push_back(std::move(e));
    ++idx;
  }
  return m;
}

/// Proposals JSON: {"tracks":[{"id": "...", "boxes": {"<frame>": [x1,y1,x2,y2]}}]}
/// with frame indices on the sampled axis [0, t_frames).
inline std::vector<TrackProposal> load_proposals(const std::filesystem::path& path,
                                                 std::size_t t_frames, double width_px,
                                                 double height_px,
                                                 std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("proposals: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("proposals: " + std::string(e.what()));
  }
  if (!j.contains("tracks") || !j["tracks"].is_array())
    throw Error("proposals: missing 'tracks' array");

  std::vector<TrackProposal> out;
  std::size_t idx = 0;
  for (const auto& jt : j["tracks"]) {
    const std::string where = "tracks[" + std::to_string(idx) + "]";
    TrackProposal p;
    p.track_id = jt.value("id", "track_" + std::to_string(idx));
    p.boxes.assign(t_frames, std::nullopt);
    if (!jt.contains("boxes") || !jt["boxes"].is_object())
      throw Error("proposals: " + where + ": missing 'boxes' object");
    for (const auto& [frame_str, jb] : jt["boxes"].items()) {
      std::size_t frame = 0;
      try {
        frame = static_cast<std::size_t>(std::stoull(frame_str));
      } catch (...) {
        throw Error("proposals: " + where + ".boxes: bad frame index '" + frame_str + "'");
      }
      if (frame >= t_frames)
        throw Error("proposals: " + where + ".boxes[" + frame_str + "]: frame index out of range");
      p.boxes[frame] = detail::parse_box(jb, where + ".boxes[" + frame_str + "]",
                                         width_px, height_px, warnings);
    }
    p.validate();
    out.push_back(std::move(p));
    ++idx;
  }
  return out;
}

/// Project a source-axis ground-truth tube onto the sampled axis: the tube
/// covers the sampled positions whose source index lies inside the gt span,
/// each taking the box of the nearest source frame within the span.
inline std::optional<Tube> resample_gt(const Tube& gt_source,
                                       const std::vector<std::int64_t>& frame_indices) {
  Tube out;
  bool found = false;
  for (std::size_t i = 0; i < frame_indices.size(); ++i) {
    const auto src = frame_indices[i];
    if (src < static_cast<std::int64_t>(gt_source.t_s) ||
        src > static_cast<std::int64_t>(gt_source.t_e))
      continue;
    if (!found) {
      out.t_s = i;
      found = true;
    }
    out.t_e = i;
    out.boxes.push_back(gt_source.box_at(static_cast<std::size_t>(src)));
  }
  if (!found) return std::nullopt;
  return out;
}

}  // namespace stvg::evalkit
