#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "stvg/dsth.hpp"
#include "stvg/toy_backend.hpp"

using namespace stvg;

namespace {

VideoClip make_clip(const std::string& id, std::size_t frames = 4) {
  VideoClip clip;
  clip.clip_id = id;
  clip.frame_count = frames;
  for (std::size_t i = 0; i < frames; ++i)
    clip.frame_indices.push_back(static_cast<std::int64_t>(3 * i));
  clip.width_px = 320;
  clip.height_px = 240;
  return clip;
}

}  // namespace

TEST_CASE("toy backend is deterministic for a fixed seed") {
  const ToyBackend a(42);
  const ToyBackend b(42);
  CHECK(a.parameter_checksum() == b.parameter_checksum());

  const auto clip = make_clip("clip_a");
  const auto s1 = a.run(clip, "is there a dog?");
  const auto s2 = b.run(clip, "is there a dog?");
  CHECK(s1.raw_attention.values == s2.raw_attention.values);
  CHECK(s1.answer_logits == s2.answer_logits);

  const ToyBackend c(43);
  CHECK(a.parameter_checksum() != c.parameter_checksum());
}

TEST_CASE("zero latent is exactly a no-op") {
  const ToyBackend backend(7);
  const auto clip = make_clip("clip_b");
  const auto shape = backend.latent_shape(clip);
  const auto with_zeros =
      backend.run(clip, "a dog", LatentPrompt::zeros(shape.m_visual, shape.embed_dim));
  const auto without = backend.run(clip, "a dog");
  CHECK(with_zeros.raw_attention.values == without.raw_attention.values);
  CHECK(with_zeros.answer_logits == without.answer_logits);
}

TEST_CASE("attention rows are softmax-normalized over 50 random runs") {
  testutil::Rng rng(50);
  for (int trial = 0; trial < 50; ++trial) {
    const ToyBackend backend(static_cast<std::uint64_t>(rng.integer(0, 1 << 20)));
    const auto clip = make_clip("clip_" + std::to_string(trial),
                                static_cast<std::size_t>(rng.integer(1, 5)));
    const auto s = backend.run(clip, "is there a cat in this video?");
    const auto& a = s.raw_attention;
    for (std::size_t l = 0; l < a.layers; ++l)
      for (std::size_t h = 0; h < a.heads; ++h)
        for (std::size_t q = 0; q < a.tokens; ++q) {
          double sum = 0.0;
          for (std::size_t k = 0; k < a.tokens; ++k) {
            REQUIRE(a.at(l, h, q, k) >= 0.0f);
            if (k > q) REQUIRE(a.at(l, h, q, k) == 0.0f);
            sum += a.at(l, h, q, k);
          }
          REQUIRE(std::abs(sum - 1.0) < 1e-5);
        }
  }
}

TEST_CASE("attention shape matches the declared layout") {
  const ToyBackend backend(3);
  const auto clip = make_clip("clip_c", 3);
  const auto s = backend.run(clip, "a red ball");
  const auto& layout = s.layout;
  CHECK(layout.n_sys == 4);
  CHECK(layout.n_role == 4);
  CHECK(layout.grid.t_frames == 3);
  CHECK(layout.m_visual == layout.grid.cells());
  CHECK(s.raw_attention.tokens == layout.total());
  CHECK(s.raw_attention.layers == 2);
  CHECK(s.raw_attention.heads == 2);
  CHECK(s.raw_attention.values.size() ==
        2 * 2 * layout.total() * layout.total());
  s.raw_attention.validate();
  s.validate();
}

TEST_CASE("logit_gap equals recomputation from the stored logit map") {
  const ToyBackend backend(17);
  const auto clip = make_clip("clip_d");
  const auto s = backend.run(clip, "is there a man in this video?");
  const double gap = logit_gap(s);
  CHECK(gap == s.answer_logits.at("yes") - s.answer_logits.at("no"));
}

TEST_CASE("constant loss has zero gradient") {
  const ToyBackend backend(5);
  const auto clip = make_clip("clip_e");
  const auto shape = backend.latent_shape(clip);
  const auto latent = LatentPrompt::zeros(shape.m_visual, shape.embed_dim);
  const auto g = backend.gradient_wrt_latent(
      clip, "a dog", latent,
      [](autodiff::Tape& tape, const DiffSession&) {
        return tape.leaf(autodiff::Tensor{1, 1, {3.5}});
      });
  CHECK(g.loss == 3.5);
  for (double v : g.grad.values) CHECK(v == 0.0);
}

TEST_CASE("LRA-loss gradient matches central finite differences") {
  testutil::Rng rng(77);
  const ToyBackend backend(91);
  const auto clip = make_clip("clip_f", 2);
  const auto shape = backend.latent_shape(clip);
  LatentPrompt latent = LatentPrompt::zeros(shape.m_visual, shape.embed_dim);
  for (double& v : latent.values) v = rng.uniform(-0.05, 0.05);
  const std::string prompt = "is there a dog in this video?";

  const auto g = backend.gradient_wrt_latent(clip, prompt, latent, dsth::lra_loss_node);

  const double step = 1e-4;
  for (int probe = 0; probe < 20; ++probe) {
    const auto i = static_cast<std::size_t>(
        rng.integer(0, static_cast<std::int64_t>(latent.values.size()) - 1));
    auto eval = [&](double delta) {
      LatentPrompt p = latent;
      p.values[i] += delta;
      return dsth::lra_loss(backend.run(clip, prompt, p));
    };
    const double numeric = (eval(step) - eval(-step)) / (2.0 * step);
    const double denom = std::max(std::abs(numeric), std::abs(g.grad.values[i]));
    if (denom < 1e-12) continue;  // both effectively zero
    CHECK(std::abs(numeric - g.grad.values[i]) / denom < 1e-3);
  }
}

TEST_CASE("doubling the loss doubles the gradient") {
  const ToyBackend backend(23);
  const auto clip = make_clip("clip_g", 2);
  const auto shape = backend.latent_shape(clip);
  const auto latent = LatentPrompt::zeros(shape.m_visual, shape.embed_dim);

  const auto g1 = backend.gradient_wrt_latent(clip, "a cat", latent, dsth::lra_loss_node);
  const auto g2 = backend.gradient_wrt_latent(
      clip, "a cat", latent, [](autodiff::Tape& tape, const DiffSession& s) {
        return tape.affine(dsth::lra_loss_node(tape, s), 0.0, 2.0);
      });
  REQUIRE(g1.grad.values.size() == g2.grad.values.size());
  CHECK(g2.loss == Catch::Approx(2.0 * g1.loss));
  for (std::size_t i = 0; i < g1.grad.values.size(); ++i)
    CHECK(g2.grad.values[i] == Catch::Approx(2.0 * g1.grad.values[i]).margin(1e-15));
}

TEST_CASE("gradient of a random linear probe of attention matches finite differences") {
  testutil::Rng rng(88);
  const ToyBackend backend(101);
  const auto clip = make_clip("clip_h", 2);
  const auto shape = backend.latent_shape(clip);
  const auto latent = LatentPrompt::zeros(shape.m_visual, shape.embed_dim);
  const std::string prompt = "a ball on the table";

  // Random probe weights over one attention matrix.
  const auto probe_session = backend.run(clip, prompt);
  const std::size_t n = probe_session.layout.total();
  autodiff::Tensor w(n, n);
  for (double& x : w.v) x = rng.uniform(-1.0, 1.0);

  auto probe_loss = [&w](autodiff::Tape& tape, const DiffSession& s) {
    return tape.dot(s.attention_node(1, 0), w);
  };
  const auto g = backend.gradient_wrt_latent(clip, prompt, latent, probe_loss);

  // Full-precision loss evaluations for the finite-difference oracle (the
  // exported RawAttention is float32 and too coarse for 1e-4 steps).
  auto eval = [&](const LatentPrompt& p) {
    return backend.gradient_wrt_latent(clip, prompt, p, probe_loss).loss;
  };

  const double step = 1e-4;
  for (int probe = 0; probe < 20; ++probe) {
    const auto i = static_cast<std::size_t>(
        rng.integer(0, static_cast<std::int64_t>(latent.values.size()) - 1));
    LatentPrompt plus = latent, minus = latent;
    plus.values[i] += step;
    minus.values[i] -= step;
    const double numeric = (eval(plus) - eval(minus)) / (2.0 * step);
    const double denom = std::max(std::abs(numeric), std::abs(g.grad.values[i]));
    if (denom < 1e-12) continue;  // both effectively zero
    CHECK(std::abs(numeric - g.grad.values[i]) / denom < 1e-3);
  }
}

TEST_CASE("parameters are frozen across gradient calls") {
  const ToyBackend backend(31);
  const auto clip = make_clip("clip_i", 2);
  const auto shape = backend.latent_shape(clip);
  const auto before = backend.parameter_checksum();
  for (int i = 0; i < 3; ++i) {
    auto latent = LatentPrompt::zeros(shape.m_visual, shape.embed_dim);
    latent.values[0] = 0.01 * (i + 1);
    backend.gradient_wrt_latent(clip, "a dog runs", latent, dsth::lra_loss_node);
  }
  CHECK(backend.parameter_checksum() == before);
}

TEST_CASE("latent shape and context errors are reported") {
  const ToyBackend backend(1);
  const auto clip = make_clip("clip_j", 2);
  LatentPrompt bad = LatentPrompt::zeros(3, 3);
  CHECK_THROWS_WITH(backend.run(clip, "a dog", bad),
                    Catch::Matchers::ContainsSubstring("latent shape error"));

  ToyDims tiny;
  tiny.max_tokens = 16;
  const ToyBackend small(1, tiny);
  CHECK_THROWS_WITH(small.run(clip, "a very long prompt that cannot fit"),
                    Catch::Matchers::ContainsSubstring("context overflow"));
}

TEST_CASE("reversed runs permute the visual content by frame") {
  const ToyBackend backend(64);
  const auto clip = make_clip("clip_k", 3);
  RunOptions rev;
  rev.reverse_frames = true;
  const auto fwd = backend.run(clip, "a dog");
  const auto bwd = backend.run(clip, "a dog", std::nullopt, rev);
  // Same layout, different content ordering -> different attention.
  CHECK(fwd.layout.total() == bwd.layout.total());
  CHECK(fwd.raw_attention.values != bwd.raw_attention.values);

  // A single-frame clip is a fixed point of the reversal.
  const auto clip1 = make_clip("clip_k1", 1);
  const auto f1 = backend.run(clip1, "a dog");
  const auto b1 = backend.run(clip1, "a dog", std::nullopt, rev);
  CHECK(f1.raw_attention.values == b1.raw_attention.values);
}
