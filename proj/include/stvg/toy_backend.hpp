#pragma once

// A desk-scale stand-in for a multimodal LLM: a seeded two-layer causal
// transformer over [system | visual | query | special] tokens with a
// frame-patch visual tokenizer (one learned embedding per mean patch
// color) and a next-token answer head. Fully deterministic for a fixed
// seed and differentiable end-to-end with respect to the visual
// embeddings, which is all the latent-prompt machinery needs.

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stvg/autodiff.hpp"
#include "stvg/backend.hpp"
#include "stvg/core.hpp"

namespace stvg {

struct ToyDims {
  int embed = 16;
  int layers = 2;
  int heads = 2;
  int grid_h = 3;
  int grid_w = 3;
  int n_sys = 4;
  int n_role = 4;
  int max_tokens = 1024;
};

/// Optional hook replacing the hash-derived patch colors, for planting
/// controlled visual content in tests. Arguments: clip id, source frame
/// index, cell row, cell col; returns an RGB triple in [0, 1].
using PatchColorFn = std::function<std::array<double, 3>(
    const std::string&, std::int64_t, std::size_t, std::size_t)>;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Deterministic gaussian stream; avoids std::normal_distribution, whose
/// output sequence is implementation-defined.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : state_(splitmix64(seed ^ 0x5bf03635ull)) {}

  double uniform() {
    state_ = splitmix64(state_);
    return static_cast<double>(state_ >> 11) * 0x1.0p-53;
  }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace detail

class ToyBackend final : public Backend {
 public:
  explicit ToyBackend(std::uint64_t seed, ToyDims dims = {}, PatchColorFn patch_color = nullptr)
      : seed_(seed), dims_(dims), patch_color_(std::move(patch_color)) {
    detail::GaussianStream g(seed);
    const auto d = static_cast<std::size_t>(dims_.embed);
    const auto v = vocab().size();
    const double emb_std = 0.5;
    const double w_std = 1.0 / std::sqrt(static_cast<double>(d));

    e_sys_ = random_tensor(g, static_cast<std::size_t>(dims_.n_sys), d, emb_std);
    e_role_ = random_tensor(g, static_cast<std::size_t>(dims_.n_role), d, emb_std);
    e_tok_ = random_tensor(g, v, d, emb_std);
    e_pos_ = random_tensor(g, static_cast<std::size_t>(dims_.max_tokens), d, emb_std);
    w_patch_ = random_tensor(g, 3, d, emb_std);
    b_patch_ = random_tensor(g, 1, d, 0.1);

    const auto layers = static_cast<std::size_t>(dims_.layers);
    layers_.resize(layers);
    for (auto& lw : layers_) {
      lw.wq = random_tensor(g, d, d, w_std);
      lw.wk = random_tensor(g, d, d, w_std);
      lw.wv = random_tensor(g, d, d, w_std);
      lw.wo = random_tensor(g, d, d, w_std);
      lw.w1 = random_tensor(g, d, 4 * d, w_std);
      lw.b1 = autodiff::Tensor(1, 4 * d);
      lw.w2 = random_tensor(g, 4 * d, d, w_std * 0.5);
      lw.b2 = autodiff::Tensor(1, d);
    }
    // Answer-head scale keeps initial yes/no gaps at O(1); the LRA loss
    // gradient carries an exp(gap) factor and blows up for wide gaps.
    w_head_ = random_tensor(g, d, v, 0.2);
    b_head_ = random_tensor(g, 1, v, 0.1);
  }

  static const std::vector<std::string>& vocab() {
    static const std::vector<std::string> kVocab = {
        "<unk>", "yes",   "no",    "is",    "there", "a",     "an",
        "the",   "in",    "this",  "video", "?",     ".",     ",",
        "man",   "woman", "person", "dog",  "cat",   "car",   "ball",
        "table", "chair", "left",  "right", "red",   "blue",  "green",
        "orange", "shirt", "hat",  "walks", "runs",  "sits",  "stands",
        "holds", "picks", "turns", "looks", "moves", "to",    "of",
        "on",    "and",   "with"};
    return kVocab;
  }

  const ToyDims& dims() const { return dims_; }
  std::uint64_t seed() const { return seed_; }

  BackendSession run(const VideoClip& video, const std::string& prompt_text,
                     const std::optional<LatentPrompt>& latent = std::nullopt,
                     const RunOptions& opts = {}) const override {
    Forward f = forward(video, prompt_text, latent, opts);
    BackendSession s;
    s.layout = f.layout;
    s.role_labels = role_labels();

    const std::size_t n = f.layout.total();
    s.raw_attention.layers = static_cast<std::size_t>(dims_.layers);
    s.raw_attention.heads = static_cast<std::size_t>(dims_.heads);
    s.raw_attention.tokens = n;
    s.raw_attention.values.resize(s.raw_attention.layers * s.raw_attention.heads * n * n);
    std::size_t pos = 0;
    for (auto node : f.attention) {
      const auto& t = f.tape->value(node);
      for (double x : t.v) s.raw_attention.values[pos++] = static_cast<float>(x);
    }

    const auto& lp = f.tape->value(f.log_probs);
    for (std::size_t i = 0; i < vocab().size(); ++i)
      s.answer_logits[vocab()[i]] = lp.v[i];
    return s;
  }

  bool differentiable() const override { return true; }

  LatentShape latent_shape(const VideoClip& video) const override {
    const auto cells = static_cast<std::size_t>(dims_.grid_h) *
                       static_cast<std::size_t>(dims_.grid_w);
    return LatentShape{video.frame_count * cells, static_cast<std::size_t>(dims_.embed)};
  }

  GradientResult gradient_wrt_latent(const VideoClip& video,
                                     const std::string& prompt_text,
                                     const LatentPrompt& latent,
                                     const DiffLoss& loss_fn,
                                     const RunOptions& opts = {}) const override {
    Forward f = forward(video, prompt_text, latent, opts);
    DiffSession ds;
    ds.tape = f.tape.get();
    ds.layout = f.layout;
    ds.log_probs = f.log_probs;
    ds.attention = f.attention;
    ds.layers = static_cast<std::size_t>(dims_.layers);
    ds.heads = static_cast<std::size_t>(dims_.heads);
    ds.vocab = &vocab();

    const autodiff::NodeId loss = loss_fn(*f.tape, ds);
    f.tape->backward(loss);

    GradientResult out;
    out.loss = f.tape->value(loss).v[0];
    const auto& g = f.tape->grad(f.latent_node);
    out.grad.m_visual = latent.m_visual;
    out.grad.embed_dim = latent.embed_dim;
    out.grad.values = g.v;
    return out;
  }

  std::uint64_t parameter_checksum() const override {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const autodiff::Tensor& t) {
      for (double x : t.v) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(x));
        std::memcpy(&bits, &x, sizeof(bits));
        h ^= bits;
        h *= 0x100000001b3ull;
      }
    };
    mix(e_sys_);
    mix(e_role_);
    mix(e_tok_);
    mix(e_pos_);
    mix(w_patch_);
    mix(b_patch_);
    for (const auto& lw : layers_) {
      mix(lw.wq);
      mix(lw.wk);
      mix(lw.wv);
      mix(lw.wo);
      mix(lw.w1);
      mix(lw.b1);
      mix(lw.w2);
      mix(lw.b2);
    }
    mix(w_head_);
    mix(b_head_);
    return h;
  }

  std::string fingerprint() const override {
    return "toy:" + std::to_string(seed_) + ":d" + std::to_string(dims_.embed) +
           "l" + std::to_string(dims_.layers) + "h" + std::to_string(dims_.heads) +
           "g" + std::to_string(dims_.grid_h) + "x" + std::to_string(dims_.grid_w);
  }

  std::vector<std::string> role_labels() const {
    std::vector<std::string> labels;
    labels.reserve(static_cast<std::size_t>(dims_.n_role));
    for (int i = 0; i < dims_.n_role; ++i)
      labels.push_back("<role" + std::to_string(i) + ">");
    return labels;
  }

  /// Word-and-punctuation tokenizer onto the fixed vocabulary.
  std::vector<std::size_t> tokenize(const std::string& text) const {
    std::vector<std::size_t> ids;
    std::string word;
    auto flush = [&]() {
      if (word.empty()) return;
      ids.push_back(vocab_index(word));
      word.clear();
    };
    for (char raw : text) {
      const auto c = static_cast<unsigned char>(raw);
      if (std::isalnum(c)) {
        word.push_back(static_cast<char>(std::tolower(c)));
      } else {
        flush();
        if (!std::isspace(c)) ids.push_back(vocab_index(std::string(1, raw)));
      }
    }
    flush();
    return ids;
  }

  /// Mean patch color for one grid cell of one source frame.
  std::array<double, 3> patch_color(const std::string& clip_id, std::int64_t source_frame,
                                    std::size_t i, std::size_t j) const {
    if (patch_color_) return patch_color_(clip_id, source_frame, i, j);
    const std::uint64_t base = detail::fnv1a64(clip_id) ^
                               detail::splitmix64(static_cast<std::uint64_t>(source_frame) + 1);
    std::array<double, 3> c;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const std::uint64_t x = detail::splitmix64(base ^ (i * 0x9e3779b9ull) ^
                                                 (j * 0x85ebca6bull) ^ (ch * 0xc2b2ae35ull));
      c[ch] = static_cast<double>(x >> 11) * 0x1.0p-53;
    }
    return c;
  }

 private:
  struct LayerWeights {
    autodiff::Tensor wq, wk, wv, wo;
    autodiff::Tensor w1, b1, w2, b2;
  };

  struct Forward {
    std::unique_ptr<autodiff::Tape> tape;
    TokenLayout layout;
    autodiff::NodeId latent_node = -1;
    autodiff::NodeId log_probs = -1;
    std::vector<autodiff::NodeId> attention;  // layer-major
  };

  static autodiff::Tensor random_tensor(detail::GaussianStream& g, std::size_t r,
                                        std::size_t c, double std_dev) {
    autodiff::Tensor t(r, c);
    for (double& x : t.v) x = g.gaussian() * std_dev;
    return t;
  }

  std::size_t vocab_index(const std::string& token) const {
    const auto& v = vocab();
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i] == token) return i;
    return 0;  // <unk>
  }

  TokenLayout make_layout(const VideoClip& video, std::size_t n_query) const {
    TokenLayout layout;
    layout.n_sys = static_cast<std::size_t>(dims_.n_sys);
    layout.grid = GridShape{video.frame_count, static_cast<std::size_t>(dims_.grid_h),
                            static_cast<std::size_t>(dims_.grid_w)};
    layout.m_visual = layout.grid.cells();
    layout.n_query = n_query;
    layout.n_role = static_cast<std::size_t>(dims_.n_role);
    return layout;
  }

  Forward forward(const VideoClip& video, const std::string& prompt_text,
                  const std::optional<LatentPrompt>& latent,
                  const RunOptions& opts) const {
    video.validate();
    const auto query_ids = tokenize(prompt_text);
    TokenLayout layout = make_layout(video, query_ids.size());
    const std::size_t n = layout.total();
    const auto d = static_cast<std::size_t>(dims_.embed);
    if (n > static_cast<std::size_t>(dims_.max_tokens)) throw Error("context overflow");
    if (latent) check_latent_shape(*latent, latent_shape(video));

    // Base embeddings: everything except the latent is constant.
    autodiff::Tensor base(n, d);
    std::size_t row = 0;
    for (std::size_t i = 0; i < layout.n_sys; ++i, ++row)
      for (std::size_t j = 0; j < d; ++j) base.at(row, j) = e_sys_.at(i, j);
    const std::size_t t_v = video.frame_count;
    for (std::size_t t = 0; t < t_v; ++t) {
      const std::size_t src_pos = opts.reverse_frames ? t_v - 1 - t : t;
      const std::int64_t src_frame = video.frame_indices[src_pos];
      for (std::size_t i = 0; i < layout.grid.h; ++i)
        for (std::size_t j = 0; j < layout.grid.w; ++j, ++row) {
          const auto c = patch_color(video.clip_id, src_frame, i, j);
          for (std::size_t e = 0; e < d; ++e)
            base.at(row, e) = c[0] * w_patch_.at(0, e) + c[1] * w_patch_.at(1, e) +
                              c[2] * w_patch_.at(2, e) + b_patch_.at(0, e);
        }
    }
    for (std::size_t q : query_ids) {
      for (std::size_t j = 0; j < d; ++j) base.at(row, j) = e_tok_.at(q, j);
      ++row;
    }
    for (std::size_t i = 0; i < layout.n_role; ++i, ++row)
      for (std::size_t j = 0; j < d; ++j) base.at(row, j) = e_role_.at(i, j);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t j = 0; j < d; ++j) base.at(p, j) += e_pos_.at(p, j);

    Forward f;
    f.tape = std::make_unique<autodiff::Tape>();
    f.layout = layout;
    auto& tape = *f.tape;

    autodiff::Tensor latent_value(layout.m_visual, d);
    if (latent) latent_value.v = latent->values;
    f.latent_node = tape.leaf(std::move(latent_value));

    autodiff::NodeId x = tape.add(tape.leaf(std::move(base)),
                                  tape.pad_rows(f.latent_node, n, layout.n_sys));

    const auto heads = static_cast<std::size_t>(dims_.heads);
    const std::size_t dh = d / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& lw : layers_) {
      const autodiff::NodeId xn = tape.rmsnorm_rows(x);
      const autodiff::NodeId q = tape.matmul(xn, tape.leaf(lw.wq));
      const autodiff::NodeId k = tape.matmul(xn, tape.leaf(lw.wk));
      const autodiff::NodeId v = tape.matmul(xn, tape.leaf(lw.wv));
      autodiff::NodeId merged = -1;
      for (std::size_t h = 0; h < heads; ++h) {
        const autodiff::NodeId qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        const autodiff::NodeId kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        const autodiff::NodeId vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        const autodiff::NodeId scores = tape.affine(tape.matmul_nt(qh, kh), 0.0, att_scale);
        const autodiff::NodeId probs = tape.causal_softmax_rows(scores);
        f.attention.push_back(probs);
        const autodiff::NodeId oh = tape.pad_cols(tape.matmul(probs, vh), d, h * dh);
        merged = (merged < 0) ? oh : tape.add(merged, oh);
      }
      x = tape.add(x, tape.matmul(merged, tape.leaf(lw.wo)));
      const autodiff::NodeId mn = tape.rmsnorm_rows(x);
      const autodiff::NodeId hidden =
          tape.silu(tape.add_row(tape.matmul(mn, tape.leaf(lw.w1)), tape.leaf(lw.b1)));
      x = tape.add(x, tape.add_row(tape.matmul(hidden, tape.leaf(lw.w2)), tape.leaf(lw.b2)));
    }

    const autodiff::NodeId last = tape.slice_rows(tape.rmsnorm_rows(x), n - 1, n);
    const autodiff::NodeId logits =
        tape.add_row(tape.matmul(last, tape.leaf(w_head_)), tape.leaf(b_head_));
    f.log_probs = tape.log_softmax_row(logits);
    return f;
  }

  std::uint64_t seed_;
  ToyDims dims_;
  PatchColorFn patch_color_;

  autodiff::Tensor e_sys_, e_role_, e_tok_, e_pos_;
  autodiff::Tensor w_patch_, b_patch_;
  std::vector<LayerWeights> layers_;
  autodiff::Tensor w_head_, b_head_;
};

}  // namespace stvg
