#pragma once

// Attention fixture format and the scripted playback backend. A fixture
// directory holds index.json plus one binary per attention array:
//
//   8-byte magic "STVGATTN"
//   4 x uint32 little-endian shape (L, H, N, N)
//   float32 little-endian row-major data
//
// Round-trips are bit-exact. The scripted backend replays stored sessions
// keyed by (clip_id, prompt sha256, reversed) and supports no gradients.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stvg/backend.hpp"
#include "stvg/core.hpp"
#include "stvg/sha256.hpp"

namespace stvg::fixture {

inline constexpr char kMagic[8] = {'S', 'T', 'V', 'G', 'A', 'T', 'T', 'N'};

namespace detail {

inline void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

static_assert(sizeof(float) == 4, "float32 storage assumed");

}  // namespace detail

inline void write_array(const std::filesystem::path& path,
                        const std::array<std::uint32_t, 4>& dims,
                        const std::vector<float>& values) {
  std::size_t expect = 1;
  for (auto d : dims) expect *= d;
  if (values.size() != expect) throw Error("fixture: array size does not match shape");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("fixture: cannot write " + path.string());
  out.write(kMagic, 8);
  for (auto d : dims) detail::put_u32(out, d);
  // Data is already IEEE-754 little-endian on every supported target.
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!out) throw Error("fixture: write failed for " + path.string());
}

struct StoredArray {
  std::array<std::uint32_t, 4> dims;
  std::vector<float> values;
};

inline StoredArray read_array(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("fixture: cannot read " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw Error("fixture: bad magic in " + path.string());
  StoredArray arr;
  std::size_t total = 1;
  for (auto& d : arr.dims) {
    d = detail::get_u32(in);
    total *= d;
  }
  arr.values.resize(total);
  in.read(reinterpret_cast<char*>(arr.values.data()),
          static_cast<std::streamsize>(total * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(total * sizeof(float)))
    throw Error("fixture: truncated array in " + path.string());
  return arr;
}

struct FixtureEntry {
  std::string clip_id;
  std::string prompt_sha256;
  bool reversed = false;
  TokenLayout layout;
  std::size_t embed_dim = 16;
  std::string attention_file;
  std::map<std::string, double> logits;
  std::vector<std::string> role_labels;
};

inline nlohmann::json layout_to_json(const TokenLayout& layout) {
  return {{"n_sys", layout.n_sys},
          {"m_visual", layout.m_visual},
          {"n_query", layout.n_query},
          {"n_role", layout.n_role},
          {"grid", {layout.grid.t_frames, layout.grid.h, layout.grid.w}}};
}

inline TokenLayout layout_from_json(const nlohmann::json& j) {
  TokenLayout layout;
  layout.n_sys = j.at("n_sys").get<std::size_t>();
  layout.m_visual = j.at("m_visual").get<std::size_t>();
  layout.n_query = j.at("n_query").get<std::size_t>();
  layout.n_role = j.at("n_role").get<std::size_t>();
  const auto& g = j.at("grid");
  layout.grid = GridShape{g.at(0).get<std::size_t>(), g.at(1).get<std::size_t>(),
                          g.at(2).get<std::size_t>()};
  layout.validate();
  return layout;
}

/// Collects sessions and writes a fixture directory.
class FixtureWriter {
 public:
  explicit FixtureWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  void add(const std::string& clip_id, const std::string& prompt_text,
           const BackendSession& session, bool reversed = false) {
    session.validate();
    FixtureEntry e;
    e.clip_id = clip_id;
    e.prompt_sha256 = sha256_hex(prompt_text);
    e.reversed = reversed;
    e.layout = session.layout;
    e.attention_file = "att_" + std::to_string(entries_.size()) + ".bin";
    e.logits = session.answer_logits;
    e.role_labels = session.role_labels;

    const auto& a = session.raw_attention;
    write_array(dir_ / e.attention_file,
                {static_cast<std::uint32_t>(a.layers), static_cast<std::uint32_t>(a.heads),
                 static_cast<std::uint32_t>(a.tokens), static_cast<std::uint32_t>(a.tokens)},
                a.values);
    entries_.push_back(std::move(e));
  }

  void finalize() const {
    nlohmann::json j;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries_) {
      nlohmann::json je;
      je["clip_id"] = e.clip_id;
      je["prompt_sha256"] = e.prompt_sha256;
      je["reversed"] = e.reversed;
      je["layout"] = layout_to_json(e.layout);
      je["embed_dim"] = e.embed_dim;
      je["attention_file"] = e.attention_file;
      je["logits"] = e.logits;
      je["role_labels"] = e.role_labels;
      j["entries"].push_back(std::move(je));
    }
    std::ofstream out(dir_ / "index.json");
    if (!out) throw Error("fixture: cannot write index.json");
    out << j.dump(2) << "\n";
  }

 private:
  std::filesystem::path dir_;
  std::vector<FixtureEntry> entries_;
};

/// Replays stored sessions; the oracle source for scoring tests.
class ScriptedBackend final : public Backend {
 public:
  explicit ScriptedBackend(const std::filesystem::path& dir) : dir_(dir) {
    const auto index_path = dir_ / "index.json";
    std::ifstream in(index_path);
    if (!in) throw Error("fixture: cannot open " + index_path.string());
    std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    index_sha_ = sha256_hex(raw);
    nlohmann::json j = nlohmann::json::parse(raw);
    for (const auto& je : j.at("entries")) {
      FixtureEntry e;
      e.clip_id = je.at("clip_id").get<std::string>();
      e.prompt_sha256 = je.at("prompt_sha256").get<std::string>();
      e.reversed = je.value("reversed", false);
      e.layout = layout_from_json(je.at("layout"));
      e.embed_dim = je.value("embed_dim", std::size_t{16});
      e.attention_file = je.at("attention_file").get<std::string>();
      e.logits = je.at("logits").get<std::map<std::string, double>>();
      if (je.contains("role_labels"))
        e.role_labels = je.at("role_labels").get<std::vector<std::string>>();
      entries_[key(e.clip_id, e.prompt_sha256, e.reversed)] = std::move(e);
    }
  }

  BackendSession run(const VideoClip& video, const std::string& prompt_text,
                     const std::optional<LatentPrompt>& latent = std::nullopt,
                     const RunOptions& opts = {}) const override {
    const auto it = entries_.find(key(video.clip_id, sha256_hex(prompt_text), opts.reverse_frames));
    if (it == entries_.end())
      throw Error("fixture miss: no entry for clip '" + video.clip_id + "' with this prompt");
    const FixtureEntry& e = it->second;
    if (latent)
      check_latent_shape(*latent, LatentShape{e.layout.m_visual, e.embed_dim});

    BackendSession s;
    s.layout = e.layout;
    s.answer_logits = e.logits;
    s.role_labels = e.role_labels;
    if (s.role_labels.empty())
      for (std::size_t i = 0; i < e.layout.n_role; ++i)
        s.role_labels.push_back("<role" + std::to_string(i) + ">");

    const StoredArray arr = read_array(dir_ / e.attention_file);
    s.raw_attention.layers = arr.dims[0];
    s.raw_attention.heads = arr.dims[1];
    s.raw_attention.tokens = arr.dims[2];
    if (arr.dims[2] != arr.dims[3] || arr.dims[2] != e.layout.total())
      throw Error("fixture: attention shape does not match layout");
    s.raw_attention.values = arr.values;
    return s;
  }

  bool differentiable() const override { return false; }

  LatentShape latent_shape(const VideoClip& video) const override {
    for (const auto& [k, e] : entries_)
      if (e.clip_id == video.clip_id) return LatentShape{e.layout.m_visual, e.embed_dim};
    throw Error("fixture miss: unknown clip '" + video.clip_id + "'");
  }

  std::uint64_t parameter_checksum() const override {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : index_sha_) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

  std::string fingerprint() const override { return "scripted:" + index_sha_.substr(0, 16); }

 private:
  static std::string key(const std::string& clip_id, const std::string& prompt_sha,
                         bool reversed) {
    return clip_id + "|" + prompt_sha + "|" + (reversed ? "r" : "f");
  }

  std::filesystem::path dir_;
  std::string index_sha_;
  std::map<std::string, FixtureEntry> entries_;
};

}  // namespace stvg::fixture
