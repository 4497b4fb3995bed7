// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices of doubles and a tape for reverse-mode gradients.
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

namespace ctquant {

struct Tensor2 {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Tensor2() = default;
  Tensor2(int r, int c, double fill = 0.0) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}
  Tensor2(int r, int c, std::vector<double> values);
  static Tensor2 row(std::initializer_list<double> values);

  double& operator()(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return v.size(); }
  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }
};

/// Handle to a tape node.
struct Var {
  int id = -1;
};

/// Records primitive operations in execution order; backward() replays them
/// in reverse. Single-threaded; use one tape per concurrent evaluation.
class Tape {
 public:
  /// A leaf. Gradients are accumulated for it when `requires_grad`.
  Var leaf(Tensor2 value, bool requires_grad = false);

  const Tensor2& value(Var x) const { return nodes_[x.id].value; }
  /// Gradient buffer (zeros when nothing flowed into the node).
  const Tensor2& grad(Var x);
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  /// a (r x c) + bias (1 x c), bias broadcast over rows.
  Var add_row(Var a, Var bias);
  Var mul(Var a, Var b);
  /// a (r x c) * gain (1 x c), gain broadcast over rows.
  Var mul_row(Var a, Var gain);
  Var scale(Var a, double s);
  Var softmax_rows(Var a);
  /// Per-row standardization, no affine part.
  Var layer_norm_rows(Var a, double eps = 1e-5);
  Var elu(Var a);
  Var sigmoid(Var a);
  /// Columns [a | b] -> a * sigmoid(b).
  Var glu(Var a);
  /// Elementwise product with a constant mask (0 or 1/(1-p) entries).
  Var dropout(Var a, const Tensor2& mask);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_rows(Var a, int begin, int end);
  Var slice_cols(Var a, int begin, int end);
  Var transpose(Var a);
  Var reshape(Var a, int rows, int cols);
  /// 1 x 1 sum of all entries.
  Var sum(Var a);
  /// Mean binary cross-entropy of logits against 0/1 targets (same shape);
  /// returns 1 x 1.
  Var bce_with_logits(Var logits, const Tensor2& targets);

  /// Reverse sweep from a 1 x 1 node. Errors: NotScalarLoss.
  void backward(Var loss);

 private:
  struct Node {
    Tensor2 value;
    Tensor2 grad;
    bool requires_grad = false;
    std::function<void()> back;
  };

  Var push(Tensor2 value, bool requires_grad, std::function<void()> back);
  Tensor2& g(int id);
  bool needs(Var x) const { return nodes_[x.id].requires_grad; }
  bool any_needs(std::initializer_list<Var> xs) const;

  std::vector<Node> nodes_;
};

/// Throws NonFinite if any entry is NaN or infinite.
void require_finite(const Tensor2& t, const char* op);

}  // namespace ctquant
