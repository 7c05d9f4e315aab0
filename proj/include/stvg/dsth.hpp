#pragma once

// Decomposed spatio-temporal highlighting: splitting a query into
// attribute and action sub-queries, turning descriptions into existence
// questions, and the logit-guided re-attention (LRA) loop that tunes an
// additive latent visual prompt at test time.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stvg/backend.hpp"
#include "stvg/core.hpp"
#include "stvg/gti.hpp"

namespace stvg::dsth {

enum class Provenance { llm_client, fallback, fixture };

struct SubQueryPair {
  std::string attribute_text;  // source of the spatial sub-query
  std::string action_text;     // source of the temporal sub-query
  Provenance provenance = Provenance::fallback;
};

// ---------------------------------------------------------------------------
// Decomposition clients
// ---------------------------------------------------------------------------

/// Request: {"query_id","text","instruction_template_id"} as one JSON line;
/// response: {"attribute","action"} as one JSON line. Transport-agnostic:
/// any client returning both fields works; failures fall back to the
/// rule-based split and never fail the pipeline.
class DecompositionClient {
 public:
  virtual ~DecompositionClient() = default;
  /// Returns {attribute, action} or nullopt on any failure.
  virtual std::optional<std::pair<std::string, std::string>> decompose(
      const std::string& query_id, const std::string& text) = 0;
  virtual Provenance provenance() const { return Provenance::llm_client; }
};

/// Canned query_id -> (attribute, action) mapping, for tests and replay.
class FixtureDecompositionClient final : public DecompositionClient {
 public:
  explicit FixtureDecompositionClient(
      std::map<std::string, std::pair<std::string, std::string>> entries)
      : entries_(std::move(entries)) {}

  std::optional<std::pair<std::string, std::string>> decompose(
      const std::string& query_id, const std::string&) override {
    const auto it = entries_.find(query_id);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  Provenance provenance() const override { return Provenance::fixture; }

 private:
  std::map<std::string, std::pair<std::string, std::string>> entries_;
};

/// Line-delimited JSON over a stream pair (e.g. a subprocess's stdio).
class LineProtocolClient final : public DecompositionClient {
 public:
  LineProtocolClient(std::istream& in, std::ostream& out,
                     std::string instruction_template_id = "stvg_decompose_v1")
      : in_(in), out_(out), template_id_(std::move(instruction_template_id)) {}

  std::optional<std::pair<std::string, std::string>> decompose(
      const std::string& query_id, const std::string& text) override {
    nlohmann::json req{{"query_id", query_id},
                       {"text", text},
                       {"instruction_template_id", template_id_}};
    out_ << req.dump() << "\n";
    out_.flush();
    std::string line;
    if (!std::getline(in_, line)) return std::nullopt;
    try {
      const auto resp = nlohmann::json::parse(line);
      std::string attribute = resp.at("attribute").get<std::string>();
      std::string action = resp.at("action").get<std::string>();
      if (attribute.empty() || action.empty()) return std::nullopt;
      return std::make_pair(std::move(attribute), std::move(action));
    } catch (...) {
      return std::nullopt;
    }
  }

 private:
  std::istream& in_;
  std::ostream& out_;
  std::string template_id_;
};

// ---------------------------------------------------------------------------
// Rule-based fallback decomposition
// ---------------------------------------------------------------------------

namespace detail {

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

inline std::string join(const std::vector<std::string>& words, std::size_t from,
                        std::size_t to) {
  std::string out;
  for (std::size_t i = from; i < to; ++i) {
    if (!out.empty()) out.push_back(' ');
    out += words[i];
  }
  return out;
}

inline const std::set<std::string>& verb_lexicon() {
  static const std::set<std::string> kVerbs = {
      "walk",   "run",    "sit",    "stand",  "hold",   "pick",  "put",
      "turn",   "look",   "move",   "go",     "take",   "open",  "close",
      "throw",  "catch",  "ride",   "jump",   "bend",   "wave",  "point",
      "touch",  "grab",   "push",   "pull",   "lift",   "drop",  "enter",
      "leave",  "approach", "cross", "climb",  "drink",  "eat",   "play",
      "talk",   "speak",  "smile",  "nod",    "shake",  "raise", "lower",
      "step",   "squat",  "kneel",  "lean",   "lie",    "dance", "clap",
      "hug",    "kiss",   "pass",   "follow", "chase",  "stop",  "start",
      "begin",  "watch",  "read",   "write",  "wipe",   "clean", "carry",
      "come",   "get",    "give",   "bring",  "place",  "reach", "swing",
      "kick",   "hit",    "slide",  "crawl",  "fall",   "rise",  "wash",
      "pour",   "cut",    "stir",   "bow",    "laugh",  "cry",   "shout"};
  return kVerbs;
}

inline bool is_finite_verb(const std::string& raw) {
  const std::string w = lower(raw);
  static const std::set<std::string> kAux = {"is", "are", "was", "were", "begins", "starts"};
  if (kAux.count(w)) return true;
  const auto& lex = verb_lexicon();
  if (lex.count(w)) return true;
  if (w.size() > 1 && w.back() == 's' && lex.count(w.substr(0, w.size() - 1))) return true;
  if (w.size() > 2 && w.compare(w.size() - 2, 2, "es") == 0 &&
      lex.count(w.substr(0, w.size() - 2)))
    return true;
  if (w.size() > 2 && w.compare(w.size() - 2, 2, "ed") == 0) {
    const std::string stem = w.substr(0, w.size() - 2);
    if (lex.count(stem) || lex.count(stem + "e")) return true;
  }
  return false;
}

inline bool is_relative_pronoun(const std::string& raw) {
  const std::string w = lower(raw);
  return w == "who" || w == "whom" || w == "whose" || w == "which" || w == "that" ||
         w == "while";
}

inline bool is_article(const std::string& raw) {
  const std::string w = lower(raw);
  return w == "a" || w == "an" || w == "the";
}

/// Index of the first finite verb outside a relative clause, or npos.
/// A relative pronoun opens a clause that consumes the next finite verb.
inline std::size_t main_verb_index(const std::vector<std::string>& words) {
  std::size_t pending_clauses = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (is_relative_pronoun(words[i])) {
      ++pending_clauses;
      continue;
    }
    if (is_finite_verb(words[i])) {
      if (pending_clauses > 0) {
        --pending_clauses;
        continue;
      }
      return i;
    }
  }
  return std::string::npos;
}

/// Leading articles plus the next word ("a man", "the tall"... head word).
inline std::string subject_head(const std::vector<std::string>& words, std::size_t end) {
  std::size_t i = 0;
  std::string out;
  while (i < end && is_article(words[i])) {
    if (!out.empty()) out.push_back(' ');
    out += words[i];
    ++i;
  }
  if (i < end) {
    if (!out.empty()) out.push_back(' ');
    out += words[i];
  }
  return out;
}

}  // namespace detail

/// Split a query into attribute and action descriptions. With a client,
/// the client's answer wins; on absence or any failure the deterministic
/// rule-based split applies: the attribute is the longest prefix before
/// the first finite verb outside a relative clause, the action is the
/// subject head plus the remainder.
inline SubQueryPair decompose_query(const QueryRecord& q,
                                    DecompositionClient* client = nullptr) {
  q.validate();
  if (client) {
    if (auto r = client->decompose(q.query_id, q.text)) {
      return SubQueryPair{std::move(r->first), std::move(r->second), client->provenance()};
    }
  }

  const auto words = detail::split_words(q.text);
  const std::size_t verb = detail::main_verb_index(words);
  if (verb == std::string::npos || verb == 0) {
    return SubQueryPair{q.text, q.text, Provenance::fallback};
  }
  std::string attribute = detail::join(words, 0, verb);
  std::string subject = detail::subject_head(words, verb);
  std::string action = subject.empty() ? detail::join(words, verb, words.size())
                                       : subject + " " + detail::join(words, verb, words.size());
  if (attribute.empty() || action.empty()) {
    return SubQueryPair{q.text, q.text, Provenance::fallback};
  }
  return SubQueryPair{std::move(attribute), std::move(action), Provenance::fallback};
}

// ---------------------------------------------------------------------------
// Interrogative templating
// ---------------------------------------------------------------------------

enum class PromptKind { spatial, temporal };

struct InterrogativePrompt {
  std::string text;
  PromptKind kind = PromptKind::spatial;
};

/// "Is there <description> in this video?" with the leading article
/// lowercased and terminal punctuation stripped.
inline InterrogativePrompt make_interrogative(const std::string& description,
                                              PromptKind kind) {
  std::string d = description;
  while (!d.empty() && (std::isspace(static_cast<unsigned char>(d.back())) ||
                        d.back() == '.' || d.back() == '!' || d.back() == '?'))
    d.pop_back();
  std::size_t start = 0;
  while (start < d.size() && std::isspace(static_cast<unsigned char>(d[start]))) ++start;
  d.erase(0, start);
  if (d.empty()) throw Error("make_interrogative: empty description");

  const auto first_space = d.find(' ');
  const std::string first = d.substr(0, first_space);
  if (detail::is_article(first))
    d[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(d[0])));

  return InterrogativePrompt{"Is there " + d + " in this video?", kind};
}

// ---------------------------------------------------------------------------
// Logit-guided re-attention
// ---------------------------------------------------------------------------

/// 1 - exp(logit_yes - logit_no); unbounded below, minimized by tuning.
inline double lra_loss(const BackendSession& session) {
  return 1.0 - std::exp(logit_gap(session));
}

/// Same objective as a tape node, for backpropagation.
inline autodiff::NodeId lra_loss_node(autodiff::Tape& tape, const DiffSession& session) {
  const autodiff::NodeId gap =
      tape.sub(session.logit_node("yes"), session.logit_node("no"));
  return tape.affine(tape.exp(gap), 1.0, -1.0);
}

struct OptimizeResult {
  LatentPrompt latent;
  bool numerical_warning = false;
  std::vector<double> loss_trace;  // loss at the start of each step
};

/// Plain gradient descent on the LRA loss: zeros init, n_ep steps of
/// latent -= step_size * grad. Model parameters are frozen throughout.
/// Non-finite losses or gradients abort the loop and return the last
/// finite latent with the warning flag set.
inline OptimizeResult optimize_prompt(const Backend& backend, const VideoClip& video,
                                      const InterrogativePrompt& prompt,
                                      const LRAConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  if (!backend.differentiable()) throw Error("gradient unsupported");
  const LatentShape shape = backend.latent_shape(video);

  OptimizeResult result;
  result.latent = LatentPrompt::zeros(shape.m_visual, shape.embed_dim);
  for (int ep = 0; ep < cfg.n_ep; ++ep) {
    GradientResult g =
        backend.gradient_wrt_latent(video, prompt.text, result.latent, lra_loss_node, opts);
    if (!std::isfinite(g.loss) || !g.grad.finite()) {
      result.numerical_warning = true;  // numerical failure: keep last finite latent
      break;
    }
    result.loss_trace.push_back(g.loss);
    LatentPrompt next = result.latent;
    for (std::size_t i = 0; i < next.values.size(); ++i)
      next.values[i] -= cfg.step_size * g.grad.values[i];
    if (!next.finite()) {
      result.numerical_warning = true;
      break;
    }
    result.latent = std::move(next);
  }
  return result;
}

/// Run the backend with a latent prompt and derive the selected grounding
/// token's aggregated attention map.
inline GroundingAttentionMap highlighted_attention(const Backend& backend,
                                                   const VideoClip& video,
                                                   const InterrogativePrompt& prompt,
                                                   const std::optional<LatentPrompt>& latent,
                                                   const RunOptions& opts = {}) {
  const BackendSession session = backend.run(video, prompt.text, latent, opts);
  const gti::SpecialTokenAttention sta =
      gti::aggregate_attention(session.raw_attention, session.layout, session.role_labels);
  const std::size_t token = gti::select_grounding_token(sta);
  return sta.maps[token];
}

}  // namespace stvg::dsth
