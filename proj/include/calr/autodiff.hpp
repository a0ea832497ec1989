#pragma once

// Tape-based reverse-mode differentiation over the Matrix primitive set.
// Forward values are computed with the same kernels the inference path uses,
// so a recorded forward is bit-identical to an unrecorded one. Gradients are
// accumulated in reverse creation order, which fixes the floating-point
// reduction order and keeps training deterministic.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "calr/error.hpp"
#include "calr/matrix.hpp"
#include "calr/nn_ops.hpp"

namespace calr {

using VarId = int32_t;

class Tape {
 public:
  VarId leaf(Matrix value, bool requires_grad = false) {
    return push(Op::kLeaf, std::move(value), -1, -1, requires_grad);
  }

  VarId matmul(VarId a, VarId b) {
    return push(Op::kMatmul, calr::matmul(value(a), value(b)), a, b);
  }

  /// a * b^T
  VarId matmul_nt(VarId a, VarId b) {
    return push(Op::kMatmulNt, calr::matmul_nt(value(a), value(b)), a, b);
  }

  VarId add(VarId a, VarId b) {
    return push(Op::kAdd, calr::add(value(a), value(b)), a, b);
  }

  VarId sub(VarId a, VarId b) {
    return push(Op::kSub, calr::sub(value(a), value(b)), a, b);
  }

  VarId hadamard(VarId a, VarId b) {
    return push(Op::kHadamard, calr::hadamard(value(a), value(b)), a, b);
  }

  VarId scale(VarId a, double s) {
    VarId id = push(Op::kScale, calr::scale(value(a), s), a, -1);
    nodes_[id].scalar = s;
    return id;
  }

  VarId silu(VarId a) { return push(Op::kSilu, calr::silu(value(a)), a, -1); }

  VarId rms_norm(VarId x, VarId gain) {
    return push(Op::kRmsNorm, calr::rms_norm(value(x), value(gain)), x, gain);
  }

  VarId causal_softmax(VarId scores) {
    return push(Op::kCausalSoftmax, calr::causal_softmax(value(scores)), scores, -1);
  }

  VarId gather_rows(VarId table, std::span<const int32_t> ids) {
    VarId id = push(Op::kGatherRows, calr::gather_rows(value(table), ids), table, -1);
    nodes_[id].ids.assign(ids.begin(), ids.end());
    return id;
  }

  VarId slice(VarId a, int r0, int rows, int c0, int cols) {
    VarId id = push(Op::kSlice, calr::slice(value(a), r0, rows, c0, cols), a, -1);
    nodes_[id].r0 = r0;
    nodes_[id].c0 = c0;
    return id;
  }

  VarId concat_rows(const std::vector<VarId>& parts) {
    return concat(parts, /*by_rows=*/true);
  }

  VarId concat_cols(const std::vector<VarId>& parts) {
    return concat(parts, /*by_rows=*/false);
  }

  /// Mean cross-entropy of logits rows against integer targets; 1x1 output.
  VarId cross_entropy_mean(VarId logits, std::span<const int32_t> targets) {
    Matrix out(1, 1);
    out(0, 0) = calr::cross_entropy_mean(value(logits), targets);
    VarId id = push(Op::kCrossEntropy, std::move(out), logits, -1);
    nodes_[id].ids.assign(targets.begin(), targets.end());
    return id;
  }

  /// Mean of squared entries; 1x1 output.
  VarId mean_square(VarId a) {
    const Matrix& m = value(a);
    double acc = 0.0;
    for (size_t i = 0; i < m.size(); ++i) acc += m.data()[i] * m.data()[i];
    Matrix out(1, 1);
    out(0, 0) = acc / static_cast<double>(m.size());
    return push(Op::kMeanSquare, std::move(out), a, -1);
  }

  const Matrix& value(VarId id) const { return nodes_[id].value; }

  /// Gradient of the loss w.r.t. node `id`; empty if never computed (frozen
  /// inputs, or backward not yet run).
  const Matrix& grad(VarId id) const { return nodes_[id].grad; }

  bool has_grad(VarId id) const { return !nodes_[id].grad.empty(); }

  size_t node_count() const { return nodes_.size(); }

  void backward(VarId loss) {
    if (consumed_) {
      throw Error(ErrorCode::kTapeConsumed, "backward: tape already consumed");
    }
    consumed_ = true;
    Node& top = nodes_[loss];
    if (top.value.rows() != 1 || top.value.cols() != 1) {
      throw Error(ErrorCode::kInvalidArgument,
                  "backward: loss must be 1x1, got " + top.value.shape_str());
    }
    if (!top.requires_grad) return;
    top.grad = Matrix(1, 1);
    top.grad(0, 0) = 1.0;
    for (VarId id = loss; id >= 0; --id) {
      Node& node = nodes_[id];
      if (!node.requires_grad || node.grad.empty()) continue;
      propagate(node);
    }
  }

 private:
  enum class Op {
    kLeaf, kMatmul, kMatmulNt, kAdd, kSub, kHadamard, kScale, kSilu,
    kRmsNorm, kCausalSoftmax, kGatherRows, kSlice, kConcatRows, kConcatCols,
    kCrossEntropy, kMeanSquare,
  };

  struct Node {
    Op op;
    VarId a = -1, b = -1;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    double scalar = 0.0;
    int r0 = 0, c0 = 0;
    std::vector<int32_t> ids;
    std::vector<VarId> inputs;
  };

  VarId push(Op op, Matrix value, VarId a, VarId b, bool leaf_requires = false) {
    Node node;
    node.op = op;
    node.a = a;
    node.b = b;
    node.value = std::move(value);
    node.requires_grad = op == Op::kLeaf
                             ? leaf_requires
                             : ((a >= 0 && nodes_[a].requires_grad) ||
                                (b >= 0 && nodes_[b].requires_grad));
    nodes_.push_back(std::move(node));
    return static_cast<VarId>(nodes_.size() - 1);
  }

  VarId concat(const std::vector<VarId>& parts, bool by_rows) {
    if (parts.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "concat: no parts");
    }
    int rows = by_rows ? 0 : value(parts[0]).rows();
    int cols = by_rows ? value(parts[0]).cols() : 0;
    for (VarId p : parts) {
      const Matrix& m = value(p);
      if (by_rows) {
        if (m.cols() != cols) {
          throw Error(ErrorCode::kShapeMismatch, "concat_rows: column mismatch");
        }
        rows += m.rows();
      } else {
        if (m.rows() != rows) {
          throw Error(ErrorCode::kShapeMismatch, "concat_cols: row mismatch");
        }
        cols += m.cols();
      }
    }
    Matrix out(rows, cols);
    int offset = 0;
    for (VarId p : parts) {
      const Matrix& m = value(p);
      paste(out, m, by_rows ? offset : 0, by_rows ? 0 : offset);
      offset += by_rows ? m.rows() : m.cols();
    }
    VarId id = push(by_rows ? Op::kConcatRows : Op::kConcatCols, std::move(out),
                    -1, -1);
    nodes_[id].inputs = parts;
    bool any_requires = false;
    for (VarId p : parts) any_requires = any_requires || nodes_[p].requires_grad;
    nodes_[id].requires_grad = any_requires;
    return id;
  }

  Matrix& ensure_grad(VarId id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) {
      node.grad = Matrix(node.value.rows(), node.value.cols());
    }
    return node.grad;
  }

  bool wants_grad(VarId id) const { return id >= 0 && nodes_[id].requires_grad; }

  void propagate(Node& node) {
    const Matrix& g = node.grad;
    switch (node.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        if (wants_grad(node.a))
          add_in_place(ensure_grad(node.a), calr::matmul_nt(g, nodes_[node.b].value));
        if (wants_grad(node.b))
          add_in_place(ensure_grad(node.b), calr::matmul_tn(nodes_[node.a].value, g));
        break;
      }
      case Op::kMatmulNt: {
        // c = a b^T: da = g b, db = g^T a
        if (wants_grad(node.a))
          add_in_place(ensure_grad(node.a), calr::matmul(g, nodes_[node.b].value));
        if (wants_grad(node.b))
          add_in_place(ensure_grad(node.b), calr::matmul_tn(g, nodes_[node.a].value));
        break;
      }
      case Op::kAdd: {
        if (wants_grad(node.a)) add_in_place(ensure_grad(node.a), g);
        if (wants_grad(node.b)) add_in_place(ensure_grad(node.b), g);
        break;
      }
      case Op::kSub: {
        if (wants_grad(node.a)) add_in_place(ensure_grad(node.a), g);
        if (wants_grad(node.b)) {
          Matrix& gb = ensure_grad(node.b);
          for (size_t i = 0; i < gb.size(); ++i) gb.data()[i] -= g.data()[i];
        }
        break;
      }
      case Op::kHadamard: {
        if (wants_grad(node.a))
          add_in_place(ensure_grad(node.a), calr::hadamard(g, nodes_[node.b].value));
        if (wants_grad(node.b))
          add_in_place(ensure_grad(node.b), calr::hadamard(g, nodes_[node.a].value));
        break;
      }
      case Op::kScale: {
        if (wants_grad(node.a))
          add_in_place(ensure_grad(node.a), calr::scale(g, node.scalar));
        break;
      }
      case Op::kSilu: {
        if (!wants_grad(node.a)) break;
        const Matrix& x = nodes_[node.a].value;
        Matrix& gx = ensure_grad(node.a);
        for (size_t i = 0; i < x.size(); ++i) {
          gx.data()[i] += g.data()[i] * silu_derivative(x.data()[i]);
        }
        break;
      }
      case Op::kRmsNorm: {
        const Matrix& x = nodes_[node.a].value;
        const Matrix& gain = nodes_[node.b].value;
        const int n = x.cols();
        Matrix* gx = wants_grad(node.a) ? &ensure_grad(node.a) : nullptr;
        Matrix* gg = wants_grad(node.b) ? &ensure_grad(node.b) : nullptr;
        for (int i = 0; i < x.rows(); ++i) {
          const double* xi = x.row(i);
          const double* gi = g.row(i);
          double ms = 0.0;
          for (int j = 0; j < n; ++j) ms += xi[j] * xi[j];
          ms /= n;
          double inv = 1.0 / std::sqrt(ms + kRmsNormEps);
          if (gx) {
            double coupled = 0.0;
            for (int j = 0; j < n; ++j) coupled += gi[j] * gain(0, j) * xi[j];
            double shrink = inv * inv * inv * coupled / n;
            double* gxi = gx->row(i);
            for (int j = 0; j < n; ++j) {
              gxi[j] += gi[j] * gain(0, j) * inv - xi[j] * shrink;
            }
          }
          if (gg) {
            double* ggr = gg->row(0);
            for (int j = 0; j < n; ++j) ggr[j] += gi[j] * xi[j] * inv;
          }
        }
        break;
      }
      case Op::kCausalSoftmax: {
        if (!wants_grad(node.a)) break;
        const Matrix& p = node.value;
        Matrix& gs = ensure_grad(node.a);
        for (int t = 0; t < p.rows(); ++t) {
          const double* pt = p.row(t);
          const double* gt = g.row(t);
          double inner = 0.0;
          for (int j = 0; j <= t; ++j) inner += gt[j] * pt[j];
          double* gst = gs.row(t);
          for (int j = 0; j <= t; ++j) gst[j] += pt[j] * (gt[j] - inner);
        }
        break;
      }
      case Op::kGatherRows: {
        if (!wants_grad(node.a)) break;
        Matrix& gt = ensure_grad(node.a);
        for (size_t k = 0; k < node.ids.size(); ++k) {
          const double* src = g.row(static_cast<int>(k));
          double* dst = gt.row(node.ids[k]);
          for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::kSlice: {
        if (!wants_grad(node.a)) break;
        Matrix& ga = ensure_grad(node.a);
        for (int i = 0; i < g.rows(); ++i) {
          const double* src = g.row(i);
          double* dst = ga.row(node.r0 + i) + node.c0;
          for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::kConcatRows:
      case Op::kConcatCols: {
        const bool by_rows = node.op == Op::kConcatRows;
        int offset = 0;
        for (VarId p : node.inputs) {
          const Matrix& part = nodes_[p].value;
          if (wants_grad(p)) {
            Matrix& gp = ensure_grad(p);
            for (int i = 0; i < part.rows(); ++i) {
              const double* src =
                  by_rows ? g.row(offset + i) : g.row(i) + offset;
              double* dst = gp.row(i);
              for (int j = 0; j < part.cols(); ++j) dst[j] += src[j];
            }
          }
          offset += by_rows ? part.rows() : part.cols();
        }
        break;
      }
      case Op::kCrossEntropy: {
        if (!wants_grad(node.a)) break;
        const Matrix& logits = nodes_[node.a].value;
        Matrix probs = softmax_rows(logits);
        Matrix& gl = ensure_grad(node.a);
        const double upstream = g(0, 0) / logits.rows();
        for (int i = 0; i < logits.rows(); ++i) {
          const double* pi = probs.row(i);
          double* gi = gl.row(i);
          for (int j = 0; j < logits.cols(); ++j) gi[j] += upstream * pi[j];
          gi[node.ids[i]] -= upstream;
        }
        break;
      }
      case Op::kMeanSquare: {
        if (!wants_grad(node.a)) break;
        const Matrix& x = nodes_[node.a].value;
        Matrix& gx = ensure_grad(node.a);
        const double c = 2.0 * g(0, 0) / static_cast<double>(x.size());
        for (size_t i = 0; i < x.size(); ++i) gx.data()[i] += c * x.data()[i];
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace calr
