#pragma once

// Minimal reverse-mode autodiff over dense 2-D double tensors. One Tape
// records one forward pass; backward() runs the recorded closures in
// reverse creation order. Only what the toy transformer needs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "stvg/core.hpp"

namespace stvg::autodiff {

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> data)
      : rows(r), cols(c), v(std::move(data)) {
    if (v.size() != r * c) throw Error("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::size_t r, std::size_t c) { return Tensor(r, c); }

  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
  std::size_t size() const { return v.size(); }

  bool finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

using NodeId = int;

class Tape {
 public:
  NodeId leaf(Tensor value) {
    return push(std::move(value), nullptr);
  }

  const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
  const Tensor& grad(NodeId id) const { return nodes_[check(id)].grad; }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.rows == tb.rows && ta.cols == tb.cols, "add: shape mismatch");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += tb.v[i];
    return push(std::move(out), [a, b](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      Tensor& gb = t.nodes_[b].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.v[i] += g.v[i];
        gb.v[i] += g.v[i];
      }
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.rows == tb.rows && ta.cols == tb.cols, "sub: shape mismatch");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] -= tb.v[i];
    return push(std::move(out), [a, b](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      Tensor& gb = t.nodes_[b].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.v[i] += g.v[i];
        gb.v[i] -= g.v[i];
      }
    });
  }

  /// alpha + beta * x, elementwise.
  NodeId affine(NodeId a, double alpha, double beta) {
    Tensor out = value(a);
    for (double& x : out.v) x = alpha + beta * x;
    return push(std::move(out), [a, beta](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += beta * g.v[i];
    });
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.cols == tb.rows, "matmul: inner dimension mismatch");
    Tensor out(ta.rows, tb.cols);
    for (std::size_t i = 0; i < ta.rows; ++i)
      for (std::size_t k = 0; k < ta.cols; ++k) {
        const double x = ta.at(i, k);
        if (x == 0.0) continue;
        for (std::size_t j = 0; j < tb.cols; ++j)
          out.at(i, j) += x * tb.at(k, j);
      }
    return push(std::move(out), [a, b](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& ta = t.nodes_[a].value;
      const Tensor& tb = t.nodes_[b].value;
      Tensor& ga = t.nodes_[a].grad;
      Tensor& gb = t.nodes_[b].grad;
      // dA += dC * B^T
      for (std::size_t i = 0; i < ta.rows; ++i)
        for (std::size_t j = 0; j < tb.cols; ++j) {
          const double gij = g.at(i, j);
          if (gij == 0.0) continue;
          for (std::size_t k = 0; k < ta.cols; ++k)
            ga.at(i, k) += gij * tb.at(k, j);
        }
      // dB += A^T * dC
      for (std::size_t k = 0; k < ta.cols; ++k)
        for (std::size_t i = 0; i < ta.rows; ++i) {
          const double aik = ta.at(i, k);
          if (aik == 0.0) continue;
          for (std::size_t j = 0; j < tb.cols; ++j)
            gb.at(k, j) += aik * g.at(i, j);
        }
    });
  }

  /// a * b^T
  NodeId matmul_nt(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.cols == tb.cols, "matmul_nt: inner dimension mismatch");
    Tensor out(ta.rows, tb.rows);
    for (std::size_t i = 0; i < ta.rows; ++i)
      for (std::size_t j = 0; j < tb.rows; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < ta.cols; ++k) s += ta.at(i, k) * tb.at(j, k);
        out.at(i, j) = s;
      }
    return push(std::move(out), [a, b](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& ta = t.nodes_[a].value;
      const Tensor& tb = t.nodes_[b].value;
      Tensor& ga = t.nodes_[a].grad;
      Tensor& gb = t.nodes_[b].grad;
      for (std::size_t i = 0; i < ta.rows; ++i)
        for (std::size_t j = 0; j < tb.rows; ++j) {
          const double gij = g.at(i, j);
          if (gij == 0.0) continue;
          for (std::size_t k = 0; k < ta.cols; ++k) {
            ga.at(i, k) += gij * tb.at(j, k);
            gb.at(j, k) += gij * ta.at(i, k);
          }
        }
    });
  }

  /// matrix + row vector broadcast over rows.
  NodeId add_row(NodeId m, NodeId row) {
    const Tensor& tm = value(m);
    const Tensor& tr = value(row);
    require(tr.rows == 1 && tr.cols == tm.cols, "add_row: shape mismatch");
    Tensor out = tm;
    for (std::size_t i = 0; i < tm.rows; ++i)
      for (std::size_t j = 0; j < tm.cols; ++j) out.at(i, j) += tr.at(0, j);
    return push(std::move(out), [m, row](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& gm = t.nodes_[m].grad;
      Tensor& gr = t.nodes_[row].grad;
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) {
          gm.at(i, j) += g.at(i, j);
          gr.at(0, j) += g.at(i, j);
        }
    });
  }

  NodeId slice_cols(NodeId a, std::size_t c0, std::size_t c1) {
    const Tensor& ta = value(a);
    require(c0 < c1 && c1 <= ta.cols, "slice_cols: bad range");
    Tensor out(ta.rows, c1 - c0);
    for (std::size_t i = 0; i < ta.rows; ++i)
      for (std::size_t j = c0; j < c1; ++j) out.at(i, j - c0) = ta.at(i, j);
    return push(std::move(out), [a, c0](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) ga.at(i, j + c0) += g.at(i, j);
    });
  }

  NodeId slice_rows(NodeId a, std::size_t r0, std::size_t r1) {
    const Tensor& ta = value(a);
    require(r0 < r1 && r1 <= ta.rows, "slice_rows: bad range");
    Tensor out(r1 - r0, ta.cols);
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t j = 0; j < ta.cols; ++j) out.at(i - r0, j) = ta.at(i, j);
    return push(std::move(out), [a, r0](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) ga.at(i + r0, j) += g.at(i, j);
    });
  }

  /// Embed `a` into a (total x cols) zero matrix starting at row `offset`.
  NodeId pad_rows(NodeId a, std::size_t total, std::size_t offset) {
    const Tensor& ta = value(a);
    require(offset + ta.rows <= total, "pad_rows: range exceeds total");
    Tensor out(total, ta.cols);
    for (std::size_t i = 0; i < ta.rows; ++i)
      for (std::size_t j = 0; j < ta.cols; ++j) out.at(i + offset, j) = ta.at(i, j);
    return push(std::move(out), [a, offset](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < ga.rows; ++i)
        for (std::size_t j = 0; j < ga.cols; ++j) ga.at(i, j) += g.at(i + offset, j);
    });
  }

  /// Embed `a` into a (rows x total) zero matrix starting at column `offset`.
  NodeId pad_cols(NodeId a, std::size_t total, std::size_t offset) {
    const Tensor& ta = value(a);
    require(offset + ta.cols <= total, "pad_cols: range exceeds total");
    Tensor out(ta.rows, total);
    for (std::size_t i = 0; i < ta.rows; ++i)
      for (std::size_t j = 0; j < ta.cols; ++j) out.at(i, j + offset) = ta.at(i, j);
    return push(std::move(out), [a, offset](Tape& t, NodeId self) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < ga.rows; ++i)
        for (std::size_t j = 0; j < ga.cols; ++j) ga.at(i, j) += g.at(i, j + offset);
    });
  }

  /// Row-wise softmax over the causal prefix; entries with col > row get
  /// exactly zero probability.
  NodeId causal_softmax_rows(NodeId a) {
    const Tensor& ta = value(a);
    require(ta.rows == ta.cols, "causal_softmax_rows: square input expected");
    Tensor out(ta.rows, ta.cols);
    for (std::size_t i = 0; i < ta.rows; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, ta.at(i, j));
      double denom = 0.0;
      for (std::size_t j = 0; j <= i; ++j) denom += std::exp(ta.at(i, j) - mx);
      for (std::size_t j = 0; j <= i; ++j)
        out.at(i, j) = std::exp(ta.at(i, j) - mx) / denom;
    }
    return push(std::move(out), [a](Tape& t, NodeId self) {
      const Tensor& y = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < y.rows; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += g.at(i, j) * y.at(i, j);
        for (std::size_t j = 0; j <= i; ++j)
          ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
    });
  }

  NodeId rmsnorm_rows(NodeId a, double eps = 1e-6) {
    const Tensor& ta = value(a);
    Tensor out(ta.rows, ta.cols);
    for (std::size_t i = 0; i < ta.rows; ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < ta.cols; ++j) ss += ta.at(i, j) * ta.at(i, j);
      const double r = std::sqrt(ss / static_cast<double>(ta.cols) + eps);
      for (std::size_t j = 0; j < ta.cols; ++j) out.at(i, j) = ta.at(i, j) / r;
    }
    return push(std::move(out), [a, eps](Tape& t, NodeId self) {
      const Tensor& x = t.nodes_[a].value;
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      const auto n = static_cast<double>(x.cols);
      for (std::size_t i = 0; i < x.rows; ++i) {
        double ss = 0.0, dot = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) {
          ss += x.at(i, j) * x.at(i, j);
          dot += g.at(i, j) * x.at(i, j);
        }
        const double r = std::sqrt(ss / n + eps);
        const double r3 = r * r * r;
        for (std::size_t j = 0; j < x.cols; ++j)
          ga.at(i, j) += g.at(i, j) / r - x.at(i, j) * dot / (n * r3);
      }
    });
  }

  NodeId silu(NodeId a) {
    const Tensor& ta = value(a);
    Tensor out = ta;
    for (double& x : out.v) x = x / (1.0 + std::exp(-x));
    return push(std::move(out), [a](Tape& t, NodeId self) {
      const Tensor& x = t.nodes_[a].value;
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x.v[i]));
        ga.v[i] += g.v[i] * s * (1.0 + x.v[i] * (1.0 - s));
      }
    });
  }

  NodeId exp(NodeId a) {
    Tensor out = value(a);
    for (double& x : out.v) x = std::exp(x);
    return push(std::move(out), [a](Tape& t, NodeId self) {
      const Tensor& y = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < y.size(); ++i) ga.v[i] += g.v[i] * y.v[i];
    });
  }

  /// Single element as a 1x1 tensor.
  NodeId pick(NodeId a, std::size_t r, std::size_t c) {
    const Tensor& ta = value(a);
    require(r < ta.rows && c < ta.cols, "pick: index out of range");
    Tensor out(1, 1);
    out.v[0] = ta.at(r, c);
    return push(std::move(out), [a, r, c](Tape& t, NodeId self) {
      t.nodes_[a].grad.at(r, c) += t.nodes_[self].grad.v[0];
    });
  }

  /// sum(x .* w) with a constant weight tensor; result is 1x1.
  NodeId dot(NodeId a, Tensor w) {
    const Tensor& ta = value(a);
    require(ta.rows == w.rows && ta.cols == w.cols, "dot: shape mismatch");
    Tensor out(1, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < ta.size(); ++i) s += ta.v[i] * w.v[i];
    out.v[0] = s;
    auto wp = std::make_shared<Tensor>(std::move(w));
    return push(std::move(out), [a, wp](Tape& t, NodeId self) {
      const double g = t.nodes_[self].grad.v[0];
      Tensor& ga = t.nodes_[a].grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga.v[i] += g * wp->v[i];
    });
  }

  /// Log-softmax over a single row vector (1 x V).
  NodeId log_softmax_row(NodeId a) {
    const Tensor& ta = value(a);
    require(ta.rows == 1, "log_softmax_row: single row expected");
    Tensor out = ta;
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : ta.v) mx = std::max(mx, x);
    double denom = 0.0;
    for (double x : ta.v) denom += std::exp(x - mx);
    const double lse = mx + std::log(denom);
    for (double& x : out.v) x -= lse;
    return push(std::move(out), [a](Tape& t, NodeId self) {
      const Tensor& y = t.nodes_[self].value;
      const Tensor& g = t.nodes_[self].grad;
      Tensor& ga = t.nodes_[a].grad;
      double gsum = 0.0;
      for (double gv : g.v) gsum += gv;
      for (std::size_t i = 0; i < y.size(); ++i)
        ga.v[i] += g.v[i] - std::exp(y.v[i]) * gsum;
    });
  }

  /// Backpropagate from a scalar (1x1) node. Grads of all nodes are reset
  /// first, so a tape can be differentiated repeatedly.
  void backward(NodeId root) {
    const Tensor& tv = value(root);
    require(tv.rows == 1 && tv.cols == 1, "backward: root must be scalar");
    for (auto& n : nodes_) std::fill(n.grad.v.begin(), n.grad.v.end(), 0.0);
    nodes_[static_cast<std::size_t>(root)].grad.v[0] = 1.0;
    for (NodeId id = root; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.back) n.back(*this, id);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&, NodeId)> back;
  };

  static void require(bool cond, const char* msg) {
    if (!cond) throw Error(msg);
  }

  std::size_t check(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw Error("Tape: bad node id");
    return static_cast<std::size_t>(id);
  }

  NodeId push(Tensor value, std::function<void(Tape&, NodeId)> back) {
    Node n;
    n.grad = Tensor(value.rows, value.cols);
    n.value = std::move(value);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace stvg::autodiff
