#pragma once

// The attention-exposing multimodal backend contract. A backend runs a
// (video, prompt, latent) triple through a frozen model and returns the
// full post-softmax attention plus next-token log-probabilities at the
// first generated answer position. Differentiable backends additionally
// expose gradients of arbitrary session-derived losses with respect to
// the latent visual prompt.

#include <cctype>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stvg/autodiff.hpp"
#include "stvg/core.hpp"

namespace stvg {

/// Learnable additive visual prompt, same shape as the visual-token
/// embeddings (m_visual x embed_dim).
struct LatentPrompt {
  std::size_t m_visual = 0;
  std::size_t embed_dim = 0;
  std::vector<double> values;  // row-major

  static LatentPrompt zeros(std::size_t m_visual, std::size_t embed_dim) {
    LatentPrompt p;
    p.m_visual = m_visual;
    p.embed_dim = embed_dim;
    p.values.assign(m_visual * embed_dim, 0.0);
    return p;
  }

  bool is_zero() const {
    for (double v : values)
      if (v != 0.0) return false;
    return true;
  }

  bool finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

struct LatentShape {
  std::size_t m_visual = 0;
  std::size_t embed_dim = 0;
};

struct RunOptions {
  // Frame-level reversion of the visual tokens; a latent passed together
  // with this flag is interpreted in the reversed frame order.
  bool reverse_frames = false;
};

/// Snapshot of one forward pass.
struct BackendSession {
  TokenLayout layout;
  RawAttention raw_attention;
  std::map<std::string, double> answer_logits;  // log-probs, first answer position
  std::vector<std::string> role_labels;         // length n_role

  void validate() const {
    layout.validate();
    if (raw_attention.tokens != layout.total())
      throw Error("BackendSession: attention size does not match layout");
    if (find_logit("yes") == nullptr || find_logit("no") == nullptr)
      throw Error("vocabulary error: session must expose yes/no logits");
  }

  /// Case-insensitive lookup on the vocabulary surface forms.
  const double* find_logit(const std::string& token) const {
    auto lower = [](std::string s) {
      for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      return s;
    };
    const std::string want = lower(token);
    for (const auto& [k, v] : answer_logits)
      if (lower(k) == want) return &v;
    return nullptr;
  }
};

/// logit("yes") - logit("no") at the first answer position.
inline double logit_gap(const BackendSession& session) {
  const double* yes = session.find_logit("yes");
  const double* no = session.find_logit("no");
  if (!yes || !no) throw Error("vocabulary error: missing yes/no logits");
  return *yes - *no;
}

/// Differentiable view of a session: the same quantities as BackendSession
/// but as live tape nodes, so a loss can be built on top of them.
struct DiffSession {
  autodiff::Tape* tape = nullptr;
  TokenLayout layout;
  autodiff::NodeId log_probs = -1;              // 1 x vocab
  std::vector<autodiff::NodeId> attention;      // L*H nodes, each N x N
  std::size_t layers = 0;
  std::size_t heads = 0;
  const std::vector<std::string>* vocab = nullptr;

  autodiff::NodeId attention_node(std::size_t l, std::size_t h) const {
    return attention.at(l * heads + h);
  }

  autodiff::NodeId logit_node(const std::string& token) const {
    auto lower = [](std::string s) {
      for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      return s;
    };
    const std::string want = lower(token);
    for (std::size_t i = 0; i < vocab->size(); ++i)
      if (lower((*vocab)[i]) == want) return tape->pick(log_probs, 0, i);
    throw Error("vocabulary error: token not in vocabulary: " + token);
  }
};

/// Builds a scalar loss node from a differentiable session.
using DiffLoss = std::function<autodiff::NodeId(autodiff::Tape&, const DiffSession&)>;

struct GradientResult {
  double loss = 0.0;
  LatentPrompt grad;  // same shape as the latent
};

class Backend {
 public:
  virtual ~Backend() = default;

  /// Forward pass. A given latent must match latent_shape(video); it is
  /// added to the visual-token embeddings before the language model runs.
  virtual BackendSession run(const VideoClip& video, const std::string& prompt_text,
                             const std::optional<LatentPrompt>& latent = std::nullopt,
                             const RunOptions& opts = {}) const = 0;

  virtual bool differentiable() const = 0;

  virtual LatentShape latent_shape(const VideoClip& video) const = 0;

  /// d loss / d latent for a loss built on the differentiable session.
  /// Model parameters are frozen and never touched.
  virtual GradientResult gradient_wrt_latent(const VideoClip& video,
                                             const std::string& prompt_text,
                                             const LatentPrompt& latent,
                                             const DiffLoss& loss_fn,
                                             const RunOptions& opts = {}) const {
    (void)video;
    (void)prompt_text;
    (void)latent;
    (void)loss_fn;
    (void)opts;
    throw Error("gradient unsupported");
  }

  /// Stable digest of the (frozen) parameters, for invariance checks.
  virtual std::uint64_t parameter_checksum() const = 0;

  /// Identifies the backend configuration in cache keys and result headers.
  virtual std::string fingerprint() const = 0;

 protected:
  static void check_latent_shape(const LatentPrompt& latent, const LatentShape& want) {
    if (latent.m_visual != want.m_visual || latent.embed_dim != want.embed_dim ||
        latent.values.size() != want.m_visual * want.embed_dim)
      throw Error("latent shape error");
  }
};

}  // namespace stvg
