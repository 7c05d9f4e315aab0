#pragma once

// Core domain types shared by every stage of the grounding pipeline, plus
// box rasterization onto the attention grid and uniform frame sampling.
// All types are plain value types, immutable by convention after
// construction; every operation here is a pure function.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace stvg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Axis-aligned box in pixel coordinates, corners real-valued.
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  bool valid() const { return x_min < x_max && y_min < y_max; }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  friend bool operator==(const BoundingBox& a, const BoundingBox& b) {
    return a.x_min == b.x_min && a.y_min == b.y_min && a.x_max == b.x_max &&
           a.y_max == b.y_max;
  }
};

/// Shape of the visual-token grid: t_frames sampled frames of h x w cells.
struct GridShape {
  std::size_t t_frames = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t frame_cells() const { return h * w; }
  std::size_t cells() const { return t_frames * h * w; }

  friend bool operator==(const GridShape& a, const GridShape& b) {
    return a.t_frames == b.t_frames && a.h == b.h && a.w == b.w;
  }
};

/// A video referenced by index only; pixel data lives inside backends.
struct VideoClip {
  std::string clip_id;
  std::size_t frame_count = 0;               // T_v, sampled frames
  std::vector<std::int64_t> frame_indices;   // source-frame indices, increasing
  std::int64_t width_px = 0;
  std::int64_t height_px = 0;

  void validate() const {
    if (frame_count < 1) throw Error("VideoClip: frame_count must be >= 1");
    if (frame_indices.size() != frame_count)
      throw Error("VideoClip: frame_indices size mismatch");
    for (std::size_t i = 1; i < frame_indices.size(); ++i)
      if (frame_indices[i] <= frame_indices[i - 1])
        throw Error("VideoClip: frame_indices must be strictly increasing");
    if (width_px <= 0 || height_px <= 0)
      throw Error("VideoClip: frame dimensions must be positive");
  }
};

/// Per-frame boxes over the contiguous span [t_s, t_e] on the sampled axis.
/// Used both for ground truth and for the final prediction.
struct Tube {
  std::size_t t_s = 0;
  std::size_t t_e = 0;
  std::vector<BoundingBox> boxes;  // one per frame in [t_s, t_e]

  std::size_t span_length() const { return t_e - t_s + 1; }
  bool contains_frame(std::size_t t) const { return t >= t_s && t <= t_e; }
  const BoundingBox& box_at(std::size_t t) const { return boxes.at(t - t_s); }

  void validate(std::size_t frame_count) const {
    if (t_s > t_e) throw Error("Tube: t_s > t_e");
    if (t_e >= frame_count) throw Error("Tube: span exceeds frame count");
    if (boxes.size() != span_length())
      throw Error("Tube: expected one box per frame in span");
    for (const auto& b : boxes)
      if (!b.valid()) throw Error("Tube: invalid box");
  }
};

using GroundTruthTube = Tube;
using GroundedTube = Tube;

struct QueryRecord {
  std::string query_id;
  std::string text;
  std::optional<GroundTruthTube> gt_tube;

  void validate() const {
    if (text.empty()) throw Error("QueryRecord: empty query text");
  }
};

/// One candidate object tube: a box per sampled frame where visible.
struct TrackProposal {
  std::string track_id;
  std::vector<std::optional<BoundingBox>> boxes;  // length T_v, absent = hidden

  std::size_t visible_count() const {
    std::size_t n = 0;
    for (const auto& b : boxes)
      if (b) ++n;
    return n;
  }

  void validate() const {
    if (visible_count() == 0)
      throw Error("TrackProposal: needs at least one visible frame");
    for (const auto& b : boxes)
      if (b && !b->valid()) throw Error("TrackProposal: invalid box");
  }
};

/// Segmentation of the model input sequence:
/// [system | visual | query | special], in that order, contiguous.
struct TokenLayout {
  std::size_t n_sys = 0;
  std::size_t m_visual = 0;
  std::size_t n_query = 0;
  std::size_t n_role = 0;
  GridShape grid;

  std::size_t total() const { return n_sys + m_visual + n_query + n_role; }
  std::size_t visual_begin() const { return n_sys; }
  std::size_t visual_end() const { return n_sys + m_visual; }
  std::size_t role_begin() const { return total() - n_role; }

  void validate() const {
    if (n_role < 1) throw Error("TokenLayout: n_role must be >= 1");
    if (grid.cells() != m_visual)
      throw Error("TokenLayout: grid does not cover the visual span");
  }
};

/// Post-softmax attention rows for every layer and head, (L, H, N, N).
struct RawAttention {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<float> values;  // row-major

  float at(std::size_t l, std::size_t h, std::size_t q, std::size_t k) const {
    return values[((l * heads + h) * tokens + q) * tokens + k];
  }
  float& at(std::size_t l, std::size_t h, std::size_t q, std::size_t k) {
    return values[((l * heads + h) * tokens + q) * tokens + k];
  }

  void validate(double row_sum_tol = 1e-4) const {
    if (values.size() != layers * heads * tokens * tokens)
      throw Error("RawAttention: value count does not match shape");
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t q = 0; q < tokens; ++q) {
          double sum = 0.0;
          for (std::size_t k = 0; k < tokens; ++k) {
            const float v = at(l, h, q, k);
            if (v < 0.0f) throw Error("RawAttention: negative value");
            sum += v;
          }
          if (std::abs(sum - 1.0) > row_sum_tol)
            throw Error("RawAttention: row does not sum to 1");
        }
  }
};

/// One token's attention over the visual grid.
struct GroundingAttentionMap {
  GridShape grid;
  int token_index = -1;  // which special token produced it; -1 = averaged
  std::vector<double> values;  // row-major (t, i, j)

  double at(std::size_t t, std::size_t i, std::size_t j) const {
    return values[(t * grid.h + i) * grid.w + j];
  }
  double& at(std::size_t t, std::size_t i, std::size_t j) {
    return values[(t * grid.h + i) * grid.w + j];
  }

  double global_max() const {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : values) m = std::max(m, v);
    return m;
  }
};

/// Binary mask over grid cells.
struct GridMask {
  GridShape grid;
  std::vector<std::uint8_t> values;  // row-major (t, i, j), 0 or 1

  std::uint8_t at(std::size_t t, std::size_t i, std::size_t j) const {
    return values[(t * grid.h + i) * grid.w + j];
  }
  std::uint8_t& at(std::size_t t, std::size_t i, std::size_t j) {
    return values[(t * grid.h + i) * grid.w + j];
  }
};

struct LRAConfig {
  int n_ep = 10;
  double step_size = 1e-2;
  enum class Init { zeros };
  Init init = Init::zeros;

  void validate() const {
    if (n_ep < 1) throw Error("LRAConfig: n_ep must be >= 1");
    if (!(step_size > 0.0)) throw Error("LRAConfig: step_size must be > 0");
  }
};

struct PipelineConfig {
  int n_frames_sampled = 20;  // N_f
  int top_k_frames = 7;       // K
  LRAConfig lra;
  double epsilon = 1e-12;     // guards every division

  void validate() const {
    if (top_k_frames < 1 || top_k_frames > n_frames_sampled)
      throw Error("PipelineConfig: need 1 <= top_k_frames <= n_frames_sampled");
    lra.validate();
  }
};

// ---------------------------------------------------------------------------
// Box rasterization (f_B2M)
// ---------------------------------------------------------------------------

namespace detail {

// Index range of cells along one axis whose centers fall inside
// [lo, hi] after scaling from pixel space to `n` grid cells.
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> center_range(
    double lo, double hi, double extent_px, std::size_t n) {
  const double scale = static_cast<double>(n) / extent_px;
  auto first = static_cast<std::ptrdiff_t>(std::ceil(lo * scale - 0.5));
  auto last = static_cast<std::ptrdiff_t>(std::floor(hi * scale - 0.5));
  first = std::max<std::ptrdiff_t>(first, 0);
  last = std::min<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(n) - 1);
  return {first, last};
}

}  // namespace detail

/// Rasterize one box onto a single-frame (h, w) grid by cell-center
/// membership. If no cell center falls inside the box, the cell whose
/// center is nearest the box center is set instead, so the mask is never
/// empty. Throws "box out of bounds" when the box misses the frame.
inline GridMask rasterize_box(const BoundingBox& box, double width_px,
                              double height_px, std::size_t h, std::size_t w) {
  if (!box.valid()) throw Error("rasterize_box: invalid box");
  if (width_px <= 0.0 || height_px <= 0.0 || h == 0 || w == 0)
    throw Error("rasterize_box: invalid frame or grid dimensions");
  if (box.x_max <= 0.0 || box.x_min >= width_px || box.y_max <= 0.0 ||
      box.y_min >= height_px)
    throw Error("box out of bounds");

  GridMask mask;
  mask.grid = GridShape{1, h, w};
  mask.values.assign(h * w, 0);

  const auto [j_lo, j_hi] = detail::center_range(box.x_min, box.x_max, width_px, w);
  const auto [i_lo, i_hi] = detail::center_range(box.y_min, box.y_max, height_px, h);

  if (j_lo <= j_hi && i_lo <= i_hi) {
    for (std::ptrdiff_t i = i_lo; i <= i_hi; ++i)
      for (std::ptrdiff_t j = j_lo; j <= j_hi; ++j)
        mask.values[static_cast<std::size_t>(i) * w +
                    static_cast<std::size_t>(j)] = 1;
    return mask;
  }

  // Nearest-cell fallback, ties resolved toward the lower index.
  const double cx = box.center_x();
  const double cy = box.center_y();
  double best = std::numeric_limits<double>::infinity();
  std::size_t bi = 0, bj = 0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double px = (static_cast<double>(j) + 0.5) * width_px / static_cast<double>(w);
      const double py = (static_cast<double>(i) + 0.5) * height_px / static_cast<double>(h);
      const double d = (px - cx) * (px - cx) + (py - cy) * (py - cy);
      if (d < best) {
        best = d;
        bi = i;
        bj = j;
      }
    }
  }
  mask.values[bi * w + bj] = 1;
  return mask;
}

/// Rasterize a whole track onto the (T_v, h, w) grid; frames where the
/// proposal has no box stay all-zero.
inline GridMask rasterize_track(const TrackProposal& track, double width_px,
                                double height_px, const GridShape& grid) {
  if (track.boxes.size() != grid.t_frames)
    throw Error("rasterize_track: proposal frame count does not match grid");
  GridMask mask;
  mask.grid = grid;
  mask.values.assign(grid.cells(), 0);
  for (std::size_t t = 0; t < grid.t_frames; ++t) {
    if (!track.boxes[t]) continue;
    GridMask frame = rasterize_box(*track.boxes[t], width_px, height_px, grid.h, grid.w);
    std::copy(frame.values.begin(), frame.values.end(),
              mask.values.begin() + static_cast<std::ptrdiff_t>(t * grid.frame_cells()));
  }
  return mask;
}

/// Rasterize a tube (box per frame in its span) onto the full grid.
inline GridMask rasterize_tube(const Tube& tube, double width_px,
                               double height_px, const GridShape& grid) {
  if (tube.t_e >= grid.t_frames)
    throw Error("rasterize_tube: span exceeds grid frames");
  GridMask mask;
  mask.grid = grid;
  mask.values.assign(grid.cells(), 0);
  for (std::size_t t = tube.t_s; t <= tube.t_e; ++t) {
    GridMask frame = rasterize_box(tube.box_at(t), width_px, height_px, grid.h, grid.w);
    std::copy(frame.values.begin(), frame.values.end(),
              mask.values.begin() + static_cast<std::ptrdiff_t>(t * grid.frame_cells()));
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Frame sampling
// ---------------------------------------------------------------------------

/// Evenly sample min(n_frames_sampled, source_frame_count) frame indices:
/// index_i = floor((i + 0.5) * source / n), duplicates removed.
inline std::vector<std::int64_t> sample_frames(std::int64_t source_frame_count,
                                               int n_frames_sampled) {
  if (source_frame_count < 1)
    throw Error("sample_frames: source_frame_count must be >= 1");
  if (n_frames_sampled < 1)
    throw Error("sample_frames: n_frames_sampled must be >= 1");
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(n_frames_sampled));
  const std::int64_t n = n_frames_sampled;
  for (std::int64_t i = 0; i < n; ++i) {
    // floor((i + 0.5) * source / n), kept in exact integer arithmetic
    const std::int64_t idx = ((2 * i + 1) * source_frame_count) / (2 * n);
    if (out.empty() || idx > out.back()) out.push_back(idx);
  }
  return out;
}

}  // namespace stvg
