#pragma once

// Batch orchestration over a dataset manifest: token selection, DSTH
// prompt tuning, TAS assembly, joint inference, metric evaluation,
// deterministic result persistence, attention caching, and the pilot
// studies (hit-ratio, rank-accuracy, consistency grouping).

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#ifndef _WIN32
#include <unistd.h>
#endif

#include "json.hpp"
#include "stvg/backend.hpp"
#include "stvg/core.hpp"
#include "stvg/dsth.hpp"
#include "stvg/evalkit.hpp"
#include "stvg/fixture.hpp"
#include "stvg/grounding.hpp"
#include "stvg/gti.hpp"
#include "stvg/sha256.hpp"
#include "stvg/tas.hpp"
#include "stvg/toy_backend.hpp"

namespace stvg::pipeline {

// Table-style ablation axes: token selection, spatial prompt tuning,
// temporal prompt tuning, temporal-augmented assembling.
struct Flags {
  bool gti = true;
  bool spatial_prompt = true;
  bool temporal_prompt = true;
  bool tas = true;
};

struct RunSettings {
  std::string manifest_path;
  std::string backend_spec;  // "toy:<seed>" or "scripted:<dir>"
  std::string out_dir;
  std::string cache_dir;  // empty: <out_dir>/cache
  Flags flags;
  PipelineConfig pipeline;
  bool heatmaps = false;
  int jobs = 1;
  std::string decomposition_fixture;  // optional query_id -> sub-query JSON
};

// ---------------------------------------------------------------------------
// Backend factory
// ---------------------------------------------------------------------------

inline std::unique_ptr<Backend> make_backend(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos)
    throw Error("backend spec must be toy:<seed> or scripted:<dir>");
  const std::string kind = spec.substr(0, colon);
  const std::string arg = spec.substr(colon + 1);
  if (kind == "toy") {
    std::uint64_t seed = 0;
    try {
      seed = std::stoull(arg);
    } catch (...) {
      throw Error("backend spec: bad toy seed '" + arg + "'");
    }
    return std::make_unique<ToyBackend>(seed);
  }
  if (kind == "scripted") return std::make_unique<fixture::ScriptedBackend>(arg);
  throw Error("backend spec: unknown kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Attention cache: one fixture-format array + JSON sidecar per key
// ---------------------------------------------------------------------------

class AttentionCache {
 public:
  explicit AttentionCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }

  static std::string key(const std::string& backend_fingerprint, const std::string& clip_id,
                         const std::string& prompt_sha,
                         const std::optional<LatentPrompt>& latent, bool reversed) {
    const std::string latent_sha =
        (latent && !latent->is_zero()) ? sha256_hex(latent->values) : "none";
    return sha256_hex(backend_fingerprint + "|" + clip_id + "|" + prompt_sha + "|" +
                      latent_sha + "|" + (reversed ? "r" : "f"));
  }

  std::optional<BackendSession> load(const std::string& key) const {
    if (dir_.empty()) return std::nullopt;
    const auto meta_path = dir_ / (key + ".json");
    const auto bin_path = dir_ / (key + ".bin");
    if (!std::filesystem::exists(meta_path) || !std::filesystem::exists(bin_path))
      return std::nullopt;
    try {
      std::ifstream in(meta_path);
      nlohmann::json j = nlohmann::json::parse(in);
      BackendSession s;
      s.layout = fixture::layout_from_json(j.at("layout"));
      s.answer_logits = j.at("logits").get<std::map<std::string, double>>();
      s.role_labels = j.at("role_labels").get<std::vector<std::string>>();
      const fixture::StoredArray arr = fixture::read_array(bin_path);
      s.raw_attention.layers = arr.dims[0];
      s.raw_attention.heads = arr.dims[1];
      s.raw_attention.tokens = arr.dims[2];
      s.raw_attention.values = arr.values;
      if (s.raw_attention.tokens != s.layout.total()) return std::nullopt;
      return s;
    } catch (...) {
      return std::nullopt;  // treat unreadable entries as misses
    }
  }

  // Best-effort: a failed write degrades to a miss on the next run. Temp
  // names carry a per-process nonce so concurrent writers of one key
  // (e.g. two runs sharing STVG_CACHE_DIR) cannot clobber each other's
  // partial files; the final rename is atomic per key.
  void store(const std::string& key, const BackendSession& s) const {
    if (dir_.empty()) return;
    try {
      const std::string nonce = "." + std::to_string(next_nonce()) + ".tmp";
      const auto& a = s.raw_attention;
      const auto tmp_bin = dir_ / (key + ".bin" + nonce);
      fixture::write_array(tmp_bin,
                           {static_cast<std::uint32_t>(a.layers),
                            static_cast<std::uint32_t>(a.heads),
                            static_cast<std::uint32_t>(a.tokens),
                            static_cast<std::uint32_t>(a.tokens)},
                           a.values);
      nlohmann::json j;
      j["layout"] = fixture::layout_to_json(s.layout);
      j["logits"] = s.answer_logits;
      j["role_labels"] = s.role_labels;
      const auto tmp_meta = dir_ / (key + ".json" + nonce);
      {
        std::ofstream out(tmp_meta);
        out << j.dump() << "\n";
      }
      std::filesystem::rename(tmp_bin, dir_ / (key + ".bin"));
      std::filesystem::rename(tmp_meta, dir_ / (key + ".json"));
    } catch (...) {
      // cache writes must never fail a sample
    }
  }

  bool enabled() const { return !dir_.empty(); }

 private:
  static std::uint64_t next_nonce() {
    static std::atomic<std::uint64_t> counter{0};
    const auto pid = static_cast<std::uint64_t>(
#ifdef _WIN32
        0
#else
        ::getpid()
#endif
    );
    return (pid << 32) ^ counter.fetch_add(1);
  }

  std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// Deterministic serialization helpers
// ---------------------------------------------------------------------------

namespace detail {

/// Dump JSON with every float rendered as fixed six-decimal notation.
inline void dump_fixed(const nlohmann::ordered_json& j, std::ostream& out, int indent,
                       int level) {
  const std::string pad(static_cast<std::size_t>(indent) * static_cast<std::size_t>(level),
                        ' ');
  const std::string pad_in(
      static_cast<std::size_t>(indent) * static_cast<std::size_t>(level + 1), ' ');
  switch (j.type()) {
    case nlohmann::ordered_json::value_t::object: {
      if (j.empty()) {
        out << "{}";
        return;
      }
      out << "{\n";
      std::size_t i = 0;
      for (const auto& [k, v] : j.items()) {
        out << pad_in << nlohmann::json(k).dump() << ": ";
        dump_fixed(v, out, indent, level + 1);
        if (++i < j.size()) out << ",";
        out << "\n";
      }
      out << pad << "}";
      return;
    }
    case nlohmann::ordered_json::value_t::array: {
      if (j.empty()) {
        out << "[]";
        return;
      }
      out << "[\n";
      for (std::size_t i = 0; i < j.size(); ++i) {
        out << pad_in;
        dump_fixed(j[i], out, indent, level + 1);
        if (i + 1 < j.size()) out << ",";
        out << "\n";
      }
      out << pad << "]";
      return;
    }
    case nlohmann::ordered_json::value_t::number_float: {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6f", j.get<double>());
      out << buf;
      return;
    }
    default:
      out << j.dump();
  }
}

inline nlohmann::ordered_json box_json(const BoundingBox& b) {
  return nlohmann::ordered_json::array({b.x_min, b.y_min, b.x_max, b.y_max});
}

inline nlohmann::ordered_json tube_json(const Tube& t) {
  nlohmann::ordered_json j;
  j["t_s"] = t.t_s;
  j["t_e"] = t.t_e;
  auto boxes = nlohmann::ordered_json::array();
  for (const auto& b : t.boxes) boxes.push_back(box_json(b));
  j["boxes"] = std::move(boxes);
  return j;
}

inline Tube tube_from_json(const nlohmann::json& j) {
  Tube t;
  t.t_s = j.at("t_s").get<std::size_t>();
  t.t_e = j.at("t_e").get<std::size_t>();
  for (const auto& jb : j.at("boxes"))
    t.boxes.push_back(BoundingBox{jb.at(0).get<double>(), jb.at(1).get<double>(),
                                  jb.at(2).get<double>(), jb.at(3).get<double>()});
  return t;
}

}  // namespace detail

/// Min-max normalized plain-text graymap (P2) of one frame of a map; a
/// constant map renders mid-gray (128).
inline void emit_heatmap(const GroundingAttentionMap& map, std::size_t frame,
                         const std::filesystem::path& out_path) {
  if (frame >= map.grid.t_frames) throw Error("emit_heatmap: frame out of range");
  double lo = map.values[0], hi = map.values[0];
  for (double v : map.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ofstream out(out_path);
  if (!out) throw Error("emit_heatmap: cannot write " + out_path.string());
  out << "P2\n" << map.grid.w << " " << map.grid.h << "\n255\n";
  for (std::size_t i = 0; i < map.grid.h; ++i) {
    for (std::size_t j = 0; j < map.grid.w; ++j) {
      int px = 128;
      if (hi > lo) {
        const double v = map.at(frame, i, j);
        px = static_cast<int>(std::lround((v - lo) / (hi - lo) * 255.0));
      }
      out << px << (j + 1 < map.grid.w ? " " : "");
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Per-sample pipeline
// ---------------------------------------------------------------------------

struct SampleOutcome {
  std::string query_id;
  std::string clip_id;
  bool ok = false;
  std::string error;
  bool tuning_warning = false;

  int spatial_token = -1;   // -1 when GTI selection is off (averaged maps)
  int temporal_token = -1;
  std::string track_id;
  Tube tube;
  std::optional<double> consistency;
  std::optional<Tube> gt;  // sampled axis
  std::optional<double> viou;

  // Kept for heatmap emission; not serialized.
  std::optional<GroundingAttentionMap> spatial_map;
  std::optional<GroundingAttentionMap> temporal_map;
};

struct RunReport {
  std::vector<SampleOutcome> samples;
  std::optional<evalkit::EvalSummary> summary;
  std::size_t n_failed = 0;
  std::vector<std::string> warnings;
  nlohmann::ordered_json config;
};

namespace detail {

inline GroundingAttentionMap mean_token_map(const gti::SpecialTokenAttention& sta) {
  GroundingAttentionMap out = sta.maps.at(0);
  out.token_index = -1;
  for (std::size_t r = 1; r < sta.maps.size(); ++r)
    for (std::size_t i = 0; i < out.values.size(); ++i)
      out.values[i] += sta.maps[r].values[i];
  for (double& v : out.values) v /= static_cast<double>(sta.maps.size());
  return out;
}

struct DerivedMap {
  GroundingAttentionMap map;
  int token_index = -1;
};

inline DerivedMap derive_map(const Backend& backend, const AttentionCache& cache,
                             const VideoClip& clip, const std::string& prompt_text,
                             const std::optional<LatentPrompt>& latent, bool reversed,
                             bool gti_selection) {
  // Zero latents are canonicalized to "absent" so tuned-off and tuned-to-zero
  // runs share cache entries and behave identically.
  std::optional<LatentPrompt> effective = latent;
  if (effective && effective->is_zero()) effective.reset();

  const std::string key = AttentionCache::key(backend.fingerprint(), clip.clip_id,
                                              sha256_hex(prompt_text), effective, reversed);
  BackendSession session;
  if (auto cached = cache.load(key)) {
    session = std::move(*cached);
  } else {
    RunOptions opts;
    opts.reverse_frames = reversed;
    session = backend.run(clip, prompt_text, effective, opts);
    cache.store(key, session);
  }

  const gti::SpecialTokenAttention sta =
      gti::aggregate_attention(session.raw_attention, session.layout, session.role_labels);
  DerivedMap out;
  if (gti_selection) {
    const std::size_t idx = gti::select_grounding_token(sta);
    out.map = sta.maps[idx];
    out.token_index = static_cast<int>(idx);
  } else {
    out.map = mean_token_map(sta);
    out.token_index = -1;
  }
  return out;
}

}  // namespace detail

inline SampleOutcome process_sample(const evalkit::ManifestEntry& entry,
                                    const std::filesystem::path& base_dir,
                                    const Backend& backend, const AttentionCache& cache,
                                    const RunSettings& settings,
                                    dsth::DecompositionClient* client) {
  SampleOutcome out;
  out.query_id = entry.query.query_id;
  out.clip_id = entry.clip_id;
  try {
    const auto indices = sample_frames(entry.source_frames, settings.pipeline.n_frames_sampled);
    VideoClip clip;
    clip.clip_id = entry.clip_id;
    clip.frame_count = indices.size();
    clip.frame_indices = indices;
    clip.width_px = entry.width_px;
    clip.height_px = entry.height_px;
    clip.validate();

    const auto w = static_cast<double>(entry.width_px);
    const auto h = static_cast<double>(entry.height_px);
    const auto proposals =
        evalkit::load_proposals(base_dir / entry.proposals_path, clip.frame_count, w, h);
    const int k = std::min<int>(settings.pipeline.top_k_frames,
                                static_cast<int>(clip.frame_count));

    const Flags& flags = settings.flags;
    const bool can_tune = backend.differentiable();

    // Branch prompts: a tuned branch asks the decomposed existence
    // question; an untuned branch runs the original query.
    dsth::InterrogativePrompt spatial_prompt{entry.query.text, dsth::PromptKind::spatial};
    dsth::InterrogativePrompt temporal_prompt{entry.query.text, dsth::PromptKind::temporal};
    if (flags.spatial_prompt || flags.temporal_prompt) {
      const dsth::SubQueryPair sub = dsth::decompose_query(entry.query, client);
      if (flags.spatial_prompt)
        spatial_prompt = dsth::make_interrogative(sub.attribute_text, dsth::PromptKind::spatial);
      if (flags.temporal_prompt)
        temporal_prompt = dsth::make_interrogative(sub.action_text, dsth::PromptKind::temporal);
    }

    auto tune = [&](const dsth::InterrogativePrompt& prompt,
                    bool reversed) -> std::optional<LatentPrompt> {
      if (!can_tune) return std::nullopt;  // playback backends stay training-free
      RunOptions opts;
      opts.reverse_frames = reversed;
      dsth::OptimizeResult r =
          dsth::optimize_prompt(backend, clip, prompt, settings.pipeline.lra, opts);
      if (r.numerical_warning) out.tuning_warning = true;
      return std::move(r.latent);
    };

    // Spatial branch.
    std::optional<LatentPrompt> latent_s;
    if (flags.spatial_prompt) latent_s = tune(spatial_prompt, false);
    detail::DerivedMap spatial =
        detail::derive_map(backend, cache, clip, spatial_prompt.text, latent_s, false, flags.gti);
    if (flags.tas) {
      std::optional<LatentPrompt> latent_r;
      if (flags.spatial_prompt) latent_r = tune(spatial_prompt, true);
      detail::DerivedMap reversed_run = detail::derive_map(
          backend, cache, clip, spatial_prompt.text, latent_r, true, flags.gti);
      out.consistency = tas::consistency_score(spatial.map,
                                               tas::reverse_frames(reversed_run.map),
                                               proposals, w, h)
                            .value;
      spatial.map = tas::assemble_spatial(spatial.map, reversed_run.map);
    }
    out.spatial_token = spatial.token_index;

    // Temporal branch.
    std::optional<LatentPrompt> latent_t;
    if (flags.temporal_prompt) latent_t = tune(temporal_prompt, false);
    detail::DerivedMap temporal = detail::derive_map(backend, cache, clip, temporal_prompt.text,
                                                     latent_t, false, flags.gti);
    out.temporal_token = temporal.token_index;

    // Joint inference.
    const grounding::TrackScores scores = grounding::track_score(spatial.map, proposals, w, h);
    const std::size_t track = grounding::select_track(scores);
    const grounding::FrameScores fscores = grounding::frame_score(temporal.map);
    const grounding::TemporalSpan span = grounding::select_temporal_span(fscores, k);
    out.tube = grounding::assemble_tube(proposals[track], span.t_s, span.t_e);
    out.track_id = proposals[track].track_id;

    if (entry.gt_source) {
      out.gt = evalkit::resample_gt(*entry.gt_source, clip.frame_indices);
      if (out.gt) out.viou = evalkit::viou(out.tube, *out.gt);
    }
    out.spatial_map = std::move(spatial.map);
    out.temporal_map = std::move(temporal.map);
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch run
// ---------------------------------------------------------------------------

inline std::unique_ptr<dsth::DecompositionClient> make_decomposition_client(
    const std::string& fixture_path) {
  if (fixture_path.empty()) return nullptr;
  std::ifstream in(fixture_path);
  if (!in) throw Error("decomposition fixture: cannot open " + fixture_path);
  nlohmann::json j = nlohmann::json::parse(in);
  std::map<std::string, std::pair<std::string, std::string>> entries;
  for (const auto& [qid, v] : j.items())
    entries[qid] = {v.at("attribute").get<std::string>(), v.at("action").get<std::string>()};
  return std::make_unique<dsth::FixtureDecompositionClient>(std::move(entries));
}

inline nlohmann::ordered_json config_json(const RunSettings& settings,
                                          const Backend& backend, bool tuning_active) {
  nlohmann::ordered_json c;
  c["backend"] = backend.fingerprint();
  c["manifest"] = settings.manifest_path;
  c["gti"] = settings.flags.gti;
  c["spatial_prompt"] = settings.flags.spatial_prompt;
  c["temporal_prompt"] = settings.flags.temporal_prompt;
  c["tas"] = settings.flags.tas;
  c["tuning_active"] = tuning_active;
  c["n_frames_sampled"] = settings.pipeline.n_frames_sampled;
  c["top_k_frames"] = settings.pipeline.top_k_frames;
  c["lra_steps"] = settings.pipeline.lra.n_ep;
  c["lra_step_size"] = settings.pipeline.lra.step_size;
  return c;
}

inline RunReport run_pipeline(const RunSettings& settings) {
  settings.pipeline.validate();
  if (settings.out_dir.empty()) throw Error("run: output directory required");
  const std::filesystem::path out_dir(settings.out_dir);
  std::filesystem::create_directories(out_dir);

  RunReport report;
  const evalkit::DatasetManifest manifest =
      evalkit::load_manifest(settings.manifest_path, &report.warnings);

  const std::filesystem::path cache_dir =
      settings.cache_dir.empty() ? out_dir / "cache" : std::filesystem::path(settings.cache_dir);
  const AttentionCache cache(cache_dir);

  const auto client = make_decomposition_client(settings.decomposition_fixture);
  const auto primary = make_backend(settings.backend_spec);
  const bool tuning_requested = settings.flags.spatial_prompt || settings.flags.temporal_prompt;
  const bool tuning_active = tuning_requested && primary->differentiable();
  if (tuning_requested && !primary->differentiable())
    report.warnings.push_back(
        "backend is not differentiable; prompt tuning skipped (latents stay zero)");
  report.config = config_json(settings, *primary, tuning_active);

  report.samples.resize(manifest.entries.size());
  const int jobs = std::max(1, settings.jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
      report.samples[i] = process_sample(manifest.entries[i], manifest.base_dir, *primary,
                                         cache, settings, client.get());
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (int t = 0; t < jobs; ++t) {
      workers.emplace_back([&]() {
        const auto worker_backend = make_backend(settings.backend_spec);
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= manifest.entries.size()) break;
          report.samples[i] = process_sample(manifest.entries[i], manifest.base_dir,
                                             *worker_backend, cache, settings, client.get());
        }
      });
    }
    for (auto& th : workers) th.join();
  }

  std::vector<std::pair<std::string, double>> per_sample;
  for (const auto& s : report.samples) {
    if (!s.ok) ++report.n_failed;
    if (s.ok && s.viou) per_sample.emplace_back(s.query_id, *s.viou);
  }
  if (!per_sample.empty()) report.summary = evalkit::summarize(std::move(per_sample));

  // results.json
  {
    nlohmann::ordered_json j;
    j["config"] = report.config;
    auto samples = nlohmann::ordered_json::array();
    for (const auto& s : report.samples) {
      nlohmann::ordered_json js;
      js["query_id"] = s.query_id;
      js["clip_id"] = s.clip_id;
      js["status"] = s.ok ? "ok" : "error";
      if (!s.ok) {
        js["error"] = s.error;
        samples.push_back(std::move(js));
        continue;
      }
      js["spatial_token"] = s.spatial_token;
      js["temporal_token"] = s.temporal_token;
      js["track_id"] = s.track_id;
      js["tube"] = detail::tube_json(s.tube);
      if (s.consistency) js["consistency"] = *s.consistency;
      if (s.tuning_warning) js["tuning_warning"] = true;
      if (s.gt) js["gt"] = detail::tube_json(*s.gt);
      if (s.viou) js["viou"] = *s.viou;
      samples.push_back(std::move(js));
    }
    j["samples"] = std::move(samples);
    nlohmann::ordered_json metrics;
    metrics["n_samples"] = report.samples.size();
    metrics["n_failed"] = report.n_failed;
    if (report.summary) {
      metrics["n_evaluated"] = report.summary->per_sample.size();
      metrics["m_viou"] = report.summary->m_viou;
      for (const auto& [thr, frac] : report.summary->viou_at) {
        char key[32];
        std::snprintf(key, sizeof(key), "viou_at_%.1f", thr);
        metrics[key] = frac;
      }
    }
    j["metrics"] = std::move(metrics);
    std::ofstream out(out_dir / "results.json");
    if (!out) throw Error("run: cannot write results.json");
    detail::dump_fixed(j, out, 2, 0);
    out << "\n";
  }

  // metrics.csv
  {
    std::ofstream out(out_dir / "metrics.csv");
    out << "query_id,clip_id,status,viou\n";
    for (const auto& s : report.samples) {
      out << s.query_id << "," << s.clip_id << "," << (s.ok ? "ok" : "error") << ",";
      if (s.viou) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", *s.viou);
        out << buf;
      }
      out << "\n";
    }
  }

  if (settings.heatmaps) {
    const auto hm_dir = out_dir / "heatmaps";
    std::filesystem::create_directories(hm_dir);
    for (const auto& s : report.samples) {
      if (!s.ok) continue;
      for (std::size_t t = 0; t < s.spatial_map->grid.t_frames; ++t) {
        emit_heatmap(*s.spatial_map, t,
                     hm_dir / (s.query_id + "_spatial_f" + std::to_string(t) + ".pgm"));
        emit_heatmap(*s.temporal_map, t,
                     hm_dir / (s.query_id + "_temporal_f" + std::to_string(t) + ".pgm"));
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Metric recomputation from persisted results
// ---------------------------------------------------------------------------

inline evalkit::EvalSummary eval_results(const std::filesystem::path& results_path) {
  std::ifstream in(results_path);
  if (!in) throw Error("eval: cannot open " + results_path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  std::vector<std::pair<std::string, double>> per_sample;
  for (const auto& js : j.at("samples")) {
    if (js.at("status").get<std::string>() != "ok" || !js.contains("gt")) continue;
    const Tube pred = detail::tube_from_json(js.at("tube"));
    const Tube gt = detail::tube_from_json(js.at("gt"));
    per_sample.emplace_back(js.at("query_id").get<std::string>(), evalkit::viou(pred, gt));
  }
  return evalkit::summarize(std::move(per_sample));
}

// ---------------------------------------------------------------------------
// Pilot studies
// ---------------------------------------------------------------------------

struct StudySettings {
  std::string manifest_path;
  std::string backend_spec;
  PipelineConfig pipeline;
  std::string out_path;  // empty: stdout only
  std::string csv_path;  // optional per-sample audit rows
};

namespace detail {

struct StudyInputs {
  VideoClip clip;
  gti::SpecialTokenAttention sta;
  Tube gt;
  std::vector<TrackProposal> proposals;
  double width = 0.0;
  double height = 0.0;
  BackendSession session;
};

inline std::optional<StudyInputs> study_inputs(const evalkit::ManifestEntry& entry,
                                               const std::filesystem::path& base_dir,
                                               const Backend& backend,
                                               const PipelineConfig& pc) {
  if (!entry.gt_source) return std::nullopt;
  StudyInputs si;
  const auto indices = sample_frames(entry.source_frames, pc.n_frames_sampled);
  si.clip.clip_id = entry.clip_id;
  si.clip.frame_count = indices.size();
  si.clip.frame_indices = indices;
  si.clip.width_px = entry.width_px;
  si.clip.height_px = entry.height_px;
  si.width = static_cast<double>(entry.width_px);
  si.height = static_cast<double>(entry.height_px);
  const auto gt = evalkit::resample_gt(*entry.gt_source, indices);
  if (!gt) return std::nullopt;
  si.gt = *gt;
  si.proposals = evalkit::load_proposals(base_dir / entry.proposals_path,
                                         si.clip.frame_count, si.width, si.height);
  si.session = backend.run(si.clip, entry.query.text);
  si.sta = gti::aggregate_attention(si.session.raw_attention, si.session.layout,
                                    si.session.role_labels);
  return si;
}

}  // namespace detail

inline nlohmann::ordered_json run_hit_ratio_study(const StudySettings& settings) {
  const auto backend = make_backend(settings.backend_spec);
  const auto manifest = evalkit::load_manifest(settings.manifest_path);
  std::vector<gti::HitRatioSample> samples;
  std::vector<std::string> labels;
  std::vector<std::pair<std::string, std::size_t>> audit;
  for (const auto& entry : manifest.entries) {
    auto si = detail::study_inputs(entry, manifest.base_dir, *backend, settings.pipeline);
    if (!si) continue;
    labels = si->sta.token_labels;
    audit.emplace_back(entry.query.query_id,
                       gti::superior_token(si->sta, si->gt, si->width, si->height,
                                           settings.pipeline.epsilon));
    samples.push_back(
        gti::HitRatioSample{std::move(si->sta), std::move(si->gt), si->width, si->height});
  }
  const auto freq = gti::hit_ratio_study(samples, settings.pipeline.epsilon);
  nlohmann::ordered_json j;
  for (std::size_t i = 0; i < freq.size(); ++i) j[labels[i]] = freq[i];
  if (!settings.csv_path.empty()) {
    std::ofstream csv(settings.csv_path);
    csv << "query_id,superior_token\n";
    for (const auto& [qid, tok] : audit) csv << qid << "," << tok << "\n";
  }
  return j;
}

inline nlohmann::ordered_json run_rank_accuracy_study(const StudySettings& settings) {
  const auto backend = make_backend(settings.backend_spec);
  const auto manifest = evalkit::load_manifest(settings.manifest_path);
  std::vector<gti::RankAccuracySample> samples;
  std::vector<std::string> query_ids;
  for (const auto& entry : manifest.entries) {
    auto si = detail::study_inputs(entry, manifest.base_dir, *backend, settings.pipeline);
    if (!si) continue;
    query_ids.push_back(entry.query.query_id);
    samples.push_back(gti::RankAccuracySample{std::move(si->sta), std::move(si->proposals),
                                              std::move(si->gt), si->width, si->height});
  }
  const auto acc = gti::rank_accuracy_study(samples);
  nlohmann::ordered_json j;
  for (std::size_t r = 0; r < acc.size(); ++r) j["rank_" + std::to_string(r)] = acc[r];
  if (!settings.csv_path.empty()) {
    std::ofstream csv(settings.csv_path);
    csv << "query_id";
    for (std::size_t r = 0; r < acc.size(); ++r) csv << ",rank_" << r << "_hit";
    csv << "\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto row = gti::rank_accuracy_study({samples[i]});
      csv << query_ids[i];
      for (double hit : row) csv << "," << static_cast<int>(hit);
      csv << "\n";
    }
  }
  return j;
}

/// Consistency grouping study; returns the groups and optionally writes
/// the CSV (group_index, mean_consistency, mean_accuracy, n_samples).
inline std::vector<tas::ConsistencyGroup> run_consistency_study(const StudySettings& settings) {
  const auto backend = make_backend(settings.backend_spec);
  const auto manifest = evalkit::load_manifest(settings.manifest_path);
  std::vector<tas::ConsistencySample> samples;
  for (const auto& entry : manifest.entries) {
    auto si = detail::study_inputs(entry, manifest.base_dir, *backend, settings.pipeline);
    if (!si) continue;
    const std::size_t token = gti::select_grounding_token(si->sta);
    const GroundingAttentionMap& forward_map = si->sta.maps[token];

    RunOptions rev;
    rev.reverse_frames = true;
    const BackendSession rs = backend->run(si->clip, entry.query.text, std::nullopt, rev);
    const auto rsta =
        gti::aggregate_attention(rs.raw_attention, rs.layout, rs.role_labels);
    const GroundingAttentionMap reversed_map =
        tas::reverse_frames(rsta.maps[gti::select_grounding_token(rsta)]);

    tas::ConsistencySample cs;
    cs.consistency =
        tas::consistency_score(forward_map, reversed_map, si->proposals, si->width, si->height)
            .value;
    const auto scores = grounding::track_score(forward_map, si->proposals, si->width, si->height);
    const std::size_t best = grounding::select_track(scores);
    cs.correct = evalkit::mean_track_iou(si->proposals[best], si->gt) >= 0.5;
    samples.push_back(cs);
  }
  const auto groups = tas::consistency_accuracy_study(std::move(samples));
  if (!settings.out_path.empty()) {
    std::ofstream out(settings.out_path);
    out << "group_index,mean_consistency,mean_accuracy,n_samples\n";
    for (const auto& g : groups) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%zu", g.group_index,
                    g.mean_consistency, g.mean_accuracy, g.n_samples);
      out << buf << "\n";
    }
  }
  return groups;
}

}  // namespace stvg::pipeline
