#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "helpers.hpp"
#include "stvg/autodiff.hpp"

using namespace stvg::autodiff;

namespace {

// Central finite differences of a scalar graph built by `build` from a
// single leaf tensor, compared against the tape gradient.
void check_gradient(Tensor input, const std::function<NodeId(Tape&, NodeId)>& build,
                    double step = 1e-6, double tol = 1e-6) {
  Tape tape;
  const NodeId leaf = tape.leaf(input);
  const NodeId out = build(tape, leaf);
  tape.backward(out);
  const Tensor analytic = tape.grad(leaf);

  for (std::size_t i = 0; i < input.size(); ++i) {
    auto eval = [&](double delta) {
      Tensor probe = input;
      probe.v[i] += delta;
      Tape t;
      const NodeId l = t.leaf(probe);
      return t.value(build(t, l)).v[0];
    };
    const double numeric = (eval(step) - eval(-step)) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(numeric), std::abs(analytic.v[i])});
    CHECK(std::abs(numeric - analytic.v[i]) / denom < tol);
  }
}

Tensor random_tensor(testutil::Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t(r, c);
  for (double& x : t.v) x = rng.uniform(-scale, scale);
  return t;
}

}  // namespace

TEST_CASE("matmul gradients match finite differences") {
  testutil::Rng rng(11);
  const Tensor b0 = random_tensor(rng, 3, 2);
  check_gradient(random_tensor(rng, 4, 3), [&](Tape& t, NodeId x) {
    const NodeId w = t.leaf(b0);
    const NodeId y = t.matmul(x, w);
    return t.dot(y, Tensor{4, 2, {1, -1, 2, 0.5, -0.25, 1, 3, -2}});
  });
}

TEST_CASE("matmul_nt gradients match finite differences") {
  testutil::Rng rng(12);
  const Tensor other = random_tensor(rng, 5, 3);
  check_gradient(random_tensor(rng, 4, 3), [&](Tape& t, NodeId x) {
    const NodeId y = t.matmul_nt(x, t.leaf(other));
    Tensor w(4, 5);
    for (std::size_t i = 0; i < w.size(); ++i) w.v[i] = (i % 3 == 0) ? 1.0 : -0.5;
    return t.dot(y, w);
  });
}

TEST_CASE("causal softmax rows sum to one over the prefix and have correct gradients") {
  testutil::Rng rng(13);
  const Tensor input = random_tensor(rng, 5, 5, 2.0);
  Tape tape;
  const NodeId probs = tape.causal_softmax_rows(tape.leaf(input));
  const Tensor& y = tape.value(probs);
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      if (j > i) CHECK(y.at(i, j) == 0.0);
      sum += y.at(i, j);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }

  check_gradient(input, [&](Tape& t, NodeId x) {
    Tensor w(5, 5);
    for (std::size_t i = 0; i < w.size(); ++i) w.v[i] = 0.1 * static_cast<double>(i % 7) - 0.3;
    return t.dot(t.causal_softmax_rows(x), w);
  });
}

TEST_CASE("rmsnorm, silu, exp, log_softmax gradients match finite differences") {
  testutil::Rng rng(14);
  check_gradient(random_tensor(rng, 3, 6), [](Tape& t, NodeId x) {
    Tensor w(3, 6);
    for (std::size_t i = 0; i < w.size(); ++i) w.v[i] = (i % 2) ? 1.0 : -1.0;
    return t.dot(t.rmsnorm_rows(x), w);
  });
  check_gradient(random_tensor(rng, 2, 4, 3.0), [](Tape& t, NodeId x) {
    Tensor w(2, 4);
    for (std::size_t i = 0; i < w.size(); ++i) w.v[i] = 0.25 * static_cast<double>(i + 1);
    return t.dot(t.silu(x), w);
  });
  check_gradient(random_tensor(rng, 1, 1), [](Tape& t, NodeId x) { return t.exp(x); });
  check_gradient(random_tensor(rng, 1, 8, 2.0), [](Tape& t, NodeId x) {
    return t.pick(t.log_softmax_row(x), 0, 3);
  });
}

TEST_CASE("structural ops route gradients to the right slots") {
  testutil::Rng rng(15);
  check_gradient(random_tensor(rng, 4, 6), [](Tape& t, NodeId x) {
    const NodeId s = t.slice_cols(x, 2, 5);
    const NodeId p = t.pad_cols(s, 8, 1);
    const NodeId r = t.slice_rows(p, 1, 3);
    Tensor w(2, 8);
    for (std::size_t i = 0; i < w.size(); ++i) w.v[i] = 1.0 + 0.1 * static_cast<double>(i);
    return t.dot(r, w);
  });
  check_gradient(random_tensor(rng, 2, 3), [](Tape& t, NodeId x) {
    const NodeId p = t.pad_rows(x, 5, 2);
    Tensor w(5, 3);
    for (std::size_t i = 0; i < w.size(); ++i) w.v[i] = -0.5 + 0.2 * static_cast<double>(i % 4);
    return t.dot(p, w);
  });
  check_gradient(random_tensor(rng, 1, 4), [](Tape& t, NodeId x) {
    const NodeId m = t.leaf(Tensor{3, 4, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}});
    Tensor w(3, 4);
    for (std::size_t i = 0; i < w.size(); ++i) w.v[i] = (i % 3 == 1) ? 2.0 : -1.0;
    return t.dot(t.add_row(m, x), w);
  });
}

TEST_CASE("backward can run repeatedly on the same tape") {
  Tape tape;
  const NodeId x = tape.leaf(Tensor{1, 1, {2.0}});
  const NodeId y = tape.exp(x);
  tape.backward(y);
  const double g1 = tape.grad(x).v[0];
  tape.backward(y);
  CHECK(tape.grad(x).v[0] == g1);  // grads reset, not accumulated
}

TEST_CASE("affine and sub combine linearly") {
  Tape tape;
  const NodeId a = tape.leaf(Tensor{1, 1, {3.0}});
  const NodeId b = tape.leaf(Tensor{1, 1, {1.0}});
  const NodeId loss = tape.affine(tape.exp(tape.sub(a, b)), 1.0, -1.0);
  CHECK(tape.value(loss).v[0] == Catch::Approx(1.0 - std::exp(2.0)));
  tape.backward(loss);
  CHECK(tape.grad(a).v[0] == Catch::Approx(-std::exp(2.0)));
  CHECK(tape.grad(b).v[0] == Catch::Approx(std::exp(2.0)));
}
