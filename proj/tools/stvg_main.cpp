// Command-line front end: batch pipeline runs, metric recomputation from
// persisted results, pilot studies, and a small demo-data generator.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "stvg/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitMajorityFailure = 3;

void apply_cache_env(stvg::pipeline::RunSettings& settings) {
  if (const char* env = std::getenv("STVG_CACHE_DIR"); env && *env)
    settings.cache_dir = env;
}

int cmd_run(const stvg::pipeline::RunSettings& settings) {
  const auto report = stvg::pipeline::run_pipeline(settings);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  for (const auto& s : report.samples)
    if (!s.ok) std::cerr << "sample " << s.query_id << " failed: " << s.error << "\n";

  std::cout << "processed " << report.samples.size() << " samples, " << report.n_failed
            << " failed\n";
  if (report.summary) {
    std::cout << "m_viou " << report.summary->m_viou;
    for (const auto& [thr, frac] : report.summary->viou_at)
      std::cout << "  viou@" << thr << " " << frac;
    std::cout << "\n";
  }
  std::cout << "results written to " << settings.out_dir << "/results.json\n";
  if (report.n_failed * 2 > report.samples.size()) return kExitMajorityFailure;
  return kExitOk;
}

int cmd_eval(const std::string& results_path) {
  const auto summary = stvg::pipeline::eval_results(results_path);
  nlohmann::ordered_json j;
  j["n_evaluated"] = summary.per_sample.size();
  j["m_viou"] = summary.m_viou;
  for (const auto& [thr, frac] : summary.viou_at) {
    char key[32];
    std::snprintf(key, sizeof(key), "viou_at_%.1f", thr);
    j[key] = frac;
  }
  stvg::pipeline::detail::dump_fixed(j, std::cout, 2, 0);
  std::cout << "\n";
  return kExitOk;
}

// Writes a small self-contained toy dataset: manifest, proposals, ground
// truth. Deterministic; handy for smoke tests and as a format reference.
int cmd_demo(const std::string& out_dir, int n_samples, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::int64_t frames = 80;
  const std::int64_t width = 320;
  const std::int64_t height = 240;

  nlohmann::ordered_json manifest;
  manifest["entries"] = nlohmann::ordered_json::array();
  for (int s = 0; s < n_samples; ++s) {
    const std::string clip_id = "clip_" + std::to_string(s);
    std::uint64_t state = seed + static_cast<std::uint64_t>(s) * 1000003ull;
    auto next01 = [&state]() {
      state = stvg::detail::splitmix64(state);
      return static_cast<double>(state >> 11) * 0x1.0p-53;
    };

    nlohmann::ordered_json tracks;
    tracks["tracks"] = nlohmann::ordered_json::array();
    const int n_tracks = 3;
    std::vector<nlohmann::ordered_json> track_boxes(n_tracks);
    for (int p = 0; p < n_tracks; ++p) {
      const double cx = 40.0 + next01() * (width - 80.0);
      const double cy = 40.0 + next01() * (height - 80.0);
      nlohmann::ordered_json boxes;
      for (std::int64_t t = 0; t < 20; ++t) {
        const double dx = (next01() - 0.5) * 10.0;
        const double dy = (next01() - 0.5) * 10.0;
        boxes[std::to_string(t)] = {cx - 30 + dx, cy - 30 + dy, cx + 30 + dx, cy + 30 + dy};
      }
      nlohmann::ordered_json jt;
      jt["id"] = "track_" + std::to_string(p);
      jt["boxes"] = boxes;
      tracks["tracks"].push_back(jt);
      track_boxes[p] = tracks["tracks"].back()["boxes"];
    }
    const std::string proposals_name = clip_id + "_proposals.json";
    {
      std::ofstream out(fs::path(out_dir) / proposals_name);
      out << tracks.dump(2) << "\n";
    }

    // Ground truth follows track 0 over a middle stretch of the video.
    const std::int64_t gt_s = 12, gt_e = 59;
    nlohmann::ordered_json gt;
    gt["t_s"] = gt_s;
    gt["t_e"] = gt_e;
    gt["boxes"] = nlohmann::ordered_json::array();
    for (std::int64_t t = gt_s; t <= gt_e; ++t) {
      // Source frame t maps to sampled slot floor(t / 4) for 80 -> 20.
      const auto& b = track_boxes[0][std::to_string(t / 4)];
      gt["boxes"].push_back(b);
    }

    nlohmann::ordered_json entry;
    entry["clip_id"] = clip_id;
    entry["frames"] = frames;
    entry["width"] = width;
    entry["height"] = height;
    entry["query"] = {{"id", "q" + std::to_string(s)},
                      {"text", "a man in the red shirt walks to the table"}};
    entry["gt"] = gt;
    entry["proposals"] = proposals_name;
    manifest["entries"].push_back(entry);
  }
  std::ofstream out(fs::path(out_dir) / "manifest.json");
  out << manifest.dump(2) << "\n";
  std::cout << "demo dataset with " << n_samples << " samples written to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zero-shot spatio-temporal video grounding pipeline"};
  app.require_subcommand(1);

  stvg::pipeline::RunSettings run_settings;
  bool no_dsth = false, no_tas = false, no_gti = false;
  bool no_spatial = false, no_temporal = false;

  auto* run = app.add_subcommand("run", "run the grounding pipeline over a manifest");
  run->add_option("--manifest", run_settings.manifest_path, "dataset manifest JSON")->required();
  run->add_option("--backend", run_settings.backend_spec, "toy:<seed> or scripted:<dir>")
      ->required();
  run->add_option("--out", run_settings.out_dir, "output directory")->required();
  run->add_flag("--no-dsth", no_dsth, "disable decomposition and prompt tuning");
  run->add_flag("--no-tas", no_tas, "disable temporal-augmented assembling");
  run->add_flag("--no-gti", no_gti, "average special tokens instead of selecting one");
  run->add_flag("--no-spatial-tune", no_spatial, "disable the spatial prompt only");
  run->add_flag("--no-temporal-tune", no_temporal, "disable the temporal prompt only");
  run->add_option("--k", run_settings.pipeline.top_k_frames, "top-K frames for the span");
  run->add_option("--frames", run_settings.pipeline.n_frames_sampled, "sampled frames per clip");
  run->add_option("--lra-steps", run_settings.pipeline.lra.n_ep, "tuning iterations");
  run->add_option("--lra-lr", run_settings.pipeline.lra.step_size, "tuning step size");
  run->add_flag("--heatmaps", run_settings.heatmaps, "emit per-frame attention heatmaps");
  run->add_option("--cache-dir", run_settings.cache_dir, "attention cache directory");
  run->add_option("--jobs", run_settings.jobs, "worker threads over manifest entries");
  run->add_option("--decompositions", run_settings.decomposition_fixture,
                  "query_id -> {attribute, action} fixture JSON");

  std::string eval_results_path;
  auto* eval = app.add_subcommand("eval", "recompute metrics from persisted results");
  eval->add_option("--results", eval_results_path, "results.json from a run")->required();

  stvg::pipeline::StudySettings study_settings;
  std::string study_kind;
  auto* study = app.add_subcommand("study", "pilot studies: hit-ratio | rank-acc | consistency");
  study->add_option("kind", study_kind, "hit-ratio, rank-acc, or consistency")->required();
  study->add_option("--manifest", study_settings.manifest_path, "dataset manifest JSON")
      ->required();
  study_settings.backend_spec = "toy:0";
  study->add_option("--backend", study_settings.backend_spec,
                    "toy:<seed> or scripted:<dir> (default toy:0)");
  study->add_option("--out", study_settings.out_path, "output file (JSON or CSV)");
  study->add_option("--csv", study_settings.csv_path, "per-sample audit CSV");
  study->add_option("--frames", study_settings.pipeline.n_frames_sampled,
                    "sampled frames per clip");

  std::string demo_out = "demo_data";
  int demo_samples = 10;
  std::uint64_t demo_seed = 7;
  auto* demo = app.add_subcommand("demo", "generate a small toy dataset");
  demo->add_option("--out", demo_out, "output directory");
  demo->add_option("--samples", demo_samples, "number of manifest entries");
  demo->add_option("--seed", demo_seed, "content seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help/error text
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    if (*run) {
      if (no_dsth) {
        run_settings.flags.spatial_prompt = false;
        run_settings.flags.temporal_prompt = false;
      }
      if (no_spatial) run_settings.flags.spatial_prompt = false;
      if (no_temporal) run_settings.flags.temporal_prompt = false;
      run_settings.flags.tas = !no_tas;
      run_settings.flags.gti = !no_gti;
      if (run_settings.cache_dir.empty()) apply_cache_env(run_settings);
      return cmd_run(run_settings);
    }
    if (*eval) return cmd_eval(eval_results_path);
    if (*study) {
      if (study_kind == "hit-ratio") {
        const auto j = stvg::pipeline::run_hit_ratio_study(study_settings);
        std::cout << j.dump(2) << "\n";
        if (!study_settings.out_path.empty()) {
          std::ofstream out(study_settings.out_path);
          out << j.dump(2) << "\n";
        }
      } else if (study_kind == "rank-acc") {
        const auto j = stvg::pipeline::run_rank_accuracy_study(study_settings);
        std::cout << j.dump(2) << "\n";
        if (!study_settings.out_path.empty()) {
          std::ofstream out(study_settings.out_path);
          out << j.dump(2) << "\n";
        }
      } else if (study_kind == "consistency") {
        const auto groups = stvg::pipeline::run_consistency_study(study_settings);
        std::cout << "group_index,mean_consistency,mean_accuracy,n_samples\n";
        for (const auto& g : groups)
          std::cout << g.group_index << "," << g.mean_consistency << "," << g.mean_accuracy
                    << "," << g.n_samples << "\n";
      } else {
        std::cerr << "unknown study kind: " << study_kind << "\n";
        return kExitConfigError;
      }
      return kExitOk;
    }
    if (*demo) return cmd_demo(demo_out, demo_samples, demo_seed);
  } catch (const stvg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfigError;
  }
  return kExitConfigError;
}
