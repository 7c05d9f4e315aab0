#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "stvg/pipeline.hpp"

using namespace stvg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stvg_pipe_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// A tiny dataset: `n` clips of 8 source frames, 3 proposals each, gt on
// track 0 over the middle frames.
void write_dataset(const fs::path& dir, int n_samples) {
  testutil::Rng rng(909);
  nlohmann::json manifest;
  manifest["entries"] = nlohmann::json::array();
  for (int s = 0; s < n_samples; ++s) {
    const std::string clip_id = "clip" + std::to_string(s);
    nlohmann::json tracks;
    tracks["tracks"] = nlohmann::json::array();
    std::vector<nlohmann::json> per_track_boxes;
    for (int p = 0; p < 3; ++p) {
      nlohmann::json boxes;
      const double cx = 40 + 80 * p + rng.uniform(-10, 10);
      for (int t = 0; t < 4; ++t)  // sampled axis: 8 source -> 4 sampled
        boxes[std::to_string(t)] = {cx - 25, 60.0 + t, cx + 25, 140.0 + t};
      nlohmann::json jt;
      jt["id"] = "track" + std::to_string(p);
      jt["boxes"] = boxes;
      tracks["tracks"].push_back(jt);
      per_track_boxes.push_back(boxes);
    }
    const std::string pname = clip_id + "_props.json";
    std::ofstream pf(dir / pname);
    pf << tracks.dump();
    pf.close();

    nlohmann::json gt;
    gt["t_s"] = 2;
    gt["t_e"] = 5;
    gt["boxes"] = nlohmann::json::array();
    for (std::int64_t src = 2; src <= 5; ++src)
      gt["boxes"].push_back(per_track_boxes[0][std::to_string(src / 2)]);

    nlohmann::json e;
    e["clip_id"] = clip_id;
    e["frames"] = 8;
    e["width"] = 320;
    e["height"] = 240;
    e["query"] = {{"id", "q" + std::to_string(s)},
                  {"text", "a man in the red shirt walks to the table"}};
    e["gt"] = gt;
    e["proposals"] = pname;
    manifest["entries"].push_back(e);
  }
  std::ofstream mf(dir / "manifest.json");
  mf << manifest.dump(2);
}

pipeline::RunSettings toy_settings(const fs::path& data, const fs::path& out) {
  pipeline::RunSettings s;
  s.manifest_path = (data / "manifest.json").string();
  s.backend_spec = "toy:11";
  s.out_dir = out.string();
  s.pipeline.n_frames_sampled = 4;
  s.pipeline.top_k_frames = 2;
  s.pipeline.lra.n_ep = 2;  // keep the suite fast
  return s;
}

VideoClip sampled_clip(const std::string& clip_id) {
  VideoClip clip;
  clip.clip_id = clip_id;
  clip.frame_count = 4;
  clip.frame_indices = {1, 3, 5, 7};  // sample_frames(8, 4)
  clip.width_px = 320;
  clip.height_px = 240;
  return clip;
}

}  // namespace

TEST_CASE("make_backend parses specs and rejects garbage") {
  CHECK(pipeline::make_backend("toy:33")->fingerprint().rfind("toy:33", 0) == 0);
  CHECK_THROWS_AS(pipeline::make_backend("nonsense"), Error);
  CHECK_THROWS_AS(pipeline::make_backend("toy:notanumber"), Error);
  CHECK_THROWS_AS(pipeline::make_backend("weird:thing"), Error);
}

TEST_CASE("emit_heatmap writes deterministic P2 graymaps") {
  const auto dir = temp_dir("heatmap");

  SECTION("min-max endpoints") {
    GroundingAttentionMap map;
    map.grid = GridShape{1, 2, 2};
    map.values = {0.0, 1.0, 1.0, 0.0};
    pipeline::emit_heatmap(map, 0, dir / "a.pgm");
    CHECK(slurp(dir / "a.pgm") == "P2\n2 2\n255\n0 255\n255 0\n");
  }

  SECTION("constant maps render mid-gray") {
    GroundingAttentionMap map;
    map.grid = GridShape{1, 2, 3};
    map.values.assign(6, 0.42);
    pipeline::emit_heatmap(map, 0, dir / "b.pgm");
    CHECK(slurp(dir / "b.pgm") == "P2\n3 2\n255\n128 128 128\n128 128 128\n");
  }

  SECTION("random maps match an independent normalization loop") {
    testutil::Rng rng(3);
    const auto map = testutil::random_map(rng, 2, 3, 4);
    pipeline::emit_heatmap(map, 1, dir / "c.pgm");
    double lo = map.values[0], hi = map.values[0];
    for (double v : map.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    std::string want = "P2\n4 3\n255\n";
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        const int px = static_cast<int>(std::lround((map.at(1, i, j) - lo) / (hi - lo) * 255.0));
        want += std::to_string(px) + (j + 1 < 4 ? " " : "");
      }
      want += "\n";
    }
    CHECK(slurp(dir / "c.pgm") == want);
  }
}

TEST_CASE("run_pipeline over a toy manifest is deterministic") {
  const auto data = temp_dir("det_data");
  write_dataset(data, 3);
  const auto out1 = temp_dir("det_out1");
  const auto out2 = temp_dir("det_out2");

  auto s1 = toy_settings(data, out1);
  s1.heatmaps = true;
  const auto r1 = pipeline::run_pipeline(s1);
  auto s2 = toy_settings(data, out2);
  s2.heatmaps = true;
  const auto r2 = pipeline::run_pipeline(s2);

  CHECK(r1.n_failed == 0);
  CHECK(r2.n_failed == 0);
  CHECK(slurp(out1 / "results.json") == slurp(out2 / "results.json"));
  CHECK(slurp(out1 / "metrics.csv") == slurp(out2 / "metrics.csv"));
  std::size_t heatmaps = 0;
  for (const auto& entry : fs::directory_iterator(out1 / "heatmaps")) {
    const auto name = entry.path().filename();
    CHECK(slurp(entry.path()) == slurp(out2 / "heatmaps" / name));
    ++heatmaps;
  }
  CHECK(heatmaps == 3 * 4 * 2);  // samples x frames x branches
  REQUIRE(r1.summary.has_value());
  CHECK(r1.summary->m_viou >= 0.0);
  CHECK(r1.summary->m_viou <= 1.0);
}

TEST_CASE("a warm cache reproduces results byte-for-byte") {
  const auto data = temp_dir("cache_data");
  write_dataset(data, 2);
  const auto cache = temp_dir("cache_shared");
  const auto out1 = temp_dir("cache_out1");
  const auto out2 = temp_dir("cache_out2");

  auto s1 = toy_settings(data, out1);
  s1.cache_dir = cache.string();
  pipeline::run_pipeline(s1);
  const auto cold_files =
      std::distance(fs::directory_iterator(cache), fs::directory_iterator{});
  CHECK(cold_files > 0);

  auto s2 = toy_settings(data, out2);
  s2.cache_dir = cache.string();
  pipeline::run_pipeline(s2);
  CHECK(slurp(out1 / "results.json") == slurp(out2 / "results.json"));
}

TEST_CASE("per-sample failures are isolated and recorded") {
  const auto data = temp_dir("fail_data");
  write_dataset(data, 2);
  // Fixtures for clip0 only: clip1 must fail, the run continues.
  const auto fixture_dir = temp_dir("fail_fixtures");
  {
    const ToyBackend toy(5);
    const auto clip = sampled_clip("clip0");
    fixture::FixtureWriter writer(fixture_dir);
    writer.add("clip0", "a man in the red shirt walks to the table",
               toy.run(clip, "a man in the red shirt walks to the table"));
    writer.finalize();
  }
  auto s = toy_settings(data, temp_dir("fail_out"));
  s.backend_spec = "scripted:" + fixture_dir.string();
  s.flags.spatial_prompt = s.flags.temporal_prompt = s.flags.tas = false;
  const auto report = pipeline::run_pipeline(s);
  REQUIRE(report.samples.size() == 2);
  CHECK(report.samples[0].ok);
  CHECK_FALSE(report.samples[1].ok);
  CHECK(report.samples[1].error.find("fixture miss") != std::string::npos);
  CHECK(report.n_failed == 1);
}

TEST_CASE("tuning flags degrade gracefully on playback backends") {
  const auto data = temp_dir("degrade_data");
  write_dataset(data, 1);
  const auto fixture_dir = temp_dir("degrade_fixtures");
  const std::string query = "a man in the red shirt walks to the table";
  {
    const ToyBackend toy(5);
    const auto clip = sampled_clip("clip0");
    QueryRecord q;
    q.query_id = "q0";
    q.text = query;
    const auto sub = dsth::decompose_query(q);
    const auto spatial = dsth::make_interrogative(sub.attribute_text, dsth::PromptKind::spatial);
    const auto temporal = dsth::make_interrogative(sub.action_text, dsth::PromptKind::temporal);
    fixture::FixtureWriter writer(fixture_dir);
    writer.add("clip0", spatial.text, toy.run(clip, spatial.text));
    RunOptions rev;
    rev.reverse_frames = true;
    writer.add("clip0", spatial.text, toy.run(clip, spatial.text, std::nullopt, rev), true);
    writer.add("clip0", temporal.text, toy.run(clip, temporal.text));
    writer.finalize();
  }
  auto s = toy_settings(data, temp_dir("degrade_out"));
  s.backend_spec = "scripted:" + fixture_dir.string();
  const auto report = pipeline::run_pipeline(s);
  REQUIRE(report.samples.size() == 1);
  CHECK(report.samples[0].ok);
  CHECK(report.config["tuning_active"] == false);
  bool warned = false;
  for (const auto& w : report.warnings)
    if (w.find("not differentiable") != std::string::npos) warned = true;
  CHECK(warned);
}

TEST_CASE("flag independence on fixtures") {
  const auto data = temp_dir("flags_data");
  write_dataset(data, 1);
  const std::string query = "a man in the red shirt walks to the table";
  QueryRecord q;
  q.query_id = "q0";
  q.text = query;
  const auto sub = dsth::decompose_query(q);
  const auto spatial = dsth::make_interrogative(sub.attribute_text, dsth::PromptKind::spatial);
  const auto temporal = dsth::make_interrogative(sub.action_text, dsth::PromptKind::temporal);

  // Fixtures for every prompt variant the flag combinations can request.
  const auto fixture_dir = temp_dir("flags_fixtures");
  {
    const ToyBackend toy(21);
    const auto clip = sampled_clip("clip0");
    fixture::FixtureWriter writer(fixture_dir);
    RunOptions rev;
    rev.reverse_frames = true;
    for (const std::string& text : {query, spatial.text, temporal.text}) {
      writer.add("clip0", text, toy.run(clip, text));
      writer.add("clip0", text, toy.run(clip, text, std::nullopt, rev), true);
    }
    writer.finalize();
  }

  int out_counter = 0;
  auto run_with = [&](bool sp, bool tp, bool tas_flag) {
    auto s = toy_settings(data, temp_dir("flags_out" + std::to_string(out_counter++)));
    s.backend_spec = "scripted:" + fixture_dir.string();
    s.flags.spatial_prompt = sp;
    s.flags.temporal_prompt = tp;
    s.flags.tas = tas_flag;
    return pipeline::run_pipeline(s);
  };

  const auto base = run_with(true, true, true);
  REQUIRE(base.samples[0].ok);

  SECTION("disabling TAS changes only spatial-branch outputs") {
    const auto no_tas = run_with(true, true, false);
    REQUIRE(no_tas.samples[0].ok);
    CHECK(no_tas.samples[0].tube.t_s == base.samples[0].tube.t_s);
    CHECK(no_tas.samples[0].tube.t_e == base.samples[0].tube.t_e);
    CHECK(no_tas.samples[0].temporal_token == base.samples[0].temporal_token);
    CHECK_FALSE(no_tas.samples[0].consistency.has_value());
  }

  SECTION("disabling the temporal prompt changes only temporal-branch outputs") {
    const auto no_tp = run_with(true, false, true);
    REQUIRE(no_tp.samples[0].ok);
    CHECK(no_tp.samples[0].track_id == base.samples[0].track_id);
    CHECK(no_tp.samples[0].spatial_token == base.samples[0].spatial_token);
    REQUIRE(no_tp.samples[0].consistency.has_value());
    REQUIRE(base.samples[0].consistency.has_value());
    CHECK(*no_tp.samples[0].consistency == *base.samples[0].consistency);
  }
}

TEST_CASE("eval_results recomputes the persisted metrics") {
  const auto data = temp_dir("eval_data");
  write_dataset(data, 3);
  const auto out = temp_dir("eval_out");
  const auto report = pipeline::run_pipeline(toy_settings(data, out));
  REQUIRE(report.summary.has_value());

  const auto summary = pipeline::eval_results(out / "results.json");
  CHECK(summary.per_sample.size() == report.summary->per_sample.size());
  CHECK(summary.m_viou == Catch::Approx(report.summary->m_viou).margin(1e-6));
  for (const auto& [thr, frac] : report.summary->viou_at)
    CHECK(summary.viou_at.at(thr) == Catch::Approx(frac).margin(1e-9));
}

TEST_CASE("decomposition fixtures feed the pipeline") {
  const auto data = temp_dir("decomp_data");
  write_dataset(data, 1);
  const auto fixture_file = data / "decomp.json";
  {
    nlohmann::json j;
    j["q0"] = {{"attribute", "a man in the red shirt"},
               {"action", "a man walks to the table"}};
    std::ofstream f(fixture_file);
    f << j.dump();
  }
  auto s = toy_settings(data, temp_dir("decomp_out"));
  s.decomposition_fixture = fixture_file.string();
  const auto report = pipeline::run_pipeline(s);
  CHECK(report.samples[0].ok);
}

TEST_CASE("study runners produce their reports on a toy corpus") {
  const auto data = temp_dir("study_data");
  write_dataset(data, 12);

  pipeline::StudySettings s;
  s.manifest_path = (data / "manifest.json").string();
  s.backend_spec = "toy:3";
  s.pipeline.n_frames_sampled = 4;

  const auto hit = pipeline::run_hit_ratio_study(s);
  double total = 0.0;
  for (const auto& [label, freq] : hit.items()) total += freq.get<double>();
  CHECK(total == Catch::Approx(1.0).margin(1e-9));

  const auto rank = pipeline::run_rank_accuracy_study(s);
  CHECK(rank.size() == 4);
  for (const auto& [label, acc] : rank.items()) {
    CHECK(acc.get<double>() >= 0.0);
    CHECK(acc.get<double>() <= 1.0);
  }

  const auto csv_path = data / "consistency.csv";
  pipeline::StudySettings cs = s;
  cs.out_path = csv_path.string();
  const auto groups = pipeline::run_consistency_study(cs);
  REQUIRE(groups.size() == 10);
  const auto csv = slurp(csv_path);
  CHECK(csv.rfind("group_index,mean_consistency,mean_accuracy,n_samples\n", 0) == 0);
  std::size_t lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 11);
}

TEST_CASE("the full flag ablation matrix completes with distinct config headers") {
  const auto data = temp_dir("matrix_data");
  write_dataset(data, 5);
  std::vector<std::string> headers;
  for (int mask = 0; mask < 16; ++mask) {
    auto s = toy_settings(data, temp_dir("matrix_out" + std::to_string(mask)));
    s.pipeline.lra.n_ep = 1;
    s.flags.gti = mask & 1;
    s.flags.spatial_prompt = mask & 2;
    s.flags.temporal_prompt = mask & 4;
    s.flags.tas = mask & 8;
    const auto report = pipeline::run_pipeline(s);
    CHECK(report.n_failed == 0);
    headers.push_back(report.config.dump());
  }
  std::sort(headers.begin(), headers.end());
  CHECK(std::adjacent_find(headers.begin(), headers.end()) == headers.end());
}

TEST_CASE("worker pools preserve result order and content") {
  const auto data = temp_dir("jobs_data");
  write_dataset(data, 4);
  const auto out1 = temp_dir("jobs_out1");
  const auto out2 = temp_dir("jobs_out2");

  pipeline::run_pipeline(toy_settings(data, out1));
  auto s2 = toy_settings(data, out2);
  s2.jobs = 3;
  pipeline::run_pipeline(s2);

  CHECK(slurp(out1 / "results.json") == slurp(out2 / "results.json"));
}
