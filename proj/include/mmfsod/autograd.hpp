#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "mmfsod/linalg.hpp"

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every operation in evaluation order; backward() replays it
// in reverse. Parameters are bound by address with Tape::param so that a
// tensor used in several places (the shared attention layer) accumulates one
// gradient.
namespace mmfsod::ag {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);
  // Leaf bound to external storage; repeated calls with the same storage return the same Var.
  Var param(const Matrix& storage);

  Var push(Matrix value, const std::vector<Var>& parents, BackwardFn fn);

  // Seeds d(output)/d(output) = 1 for a 1x1 output and propagates.
  void backward(Var output);

  const Matrix& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  // Gradient of a node; zeros when nothing flowed into it.
  Matrix grad(Var v) const;
  // Gradient of a bound parameter; zeros when unbound or when nothing flowed.
  Matrix grad_of(const Matrix& storage) const;
  // True when backward() delivered a gradient contribution to the parameter.
  bool received_grad(const Matrix& storage) const;

  void accumulate(int id, const Matrix& delta);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Matrix*, int> bound_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var hadamard(Var a, Var b);
Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var row);
// Repeats a 1 x n row `rows` times.
Var broadcast_rows(Var row, Eigen::Index rows);
Var sigmoid(Var a);
Var relu(Var a);
// x * Phi(x) with the exact normal CDF.
Var gelu(Var a);
// Row-wise softmax. When `allowed` is non-empty it has a's shape and entries
// that are zero are excluded (probability exactly 0). Every row must allow at
// least one entry.
Var softmax_rows(Var a, const Matrix& allowed = Matrix());
// Per-row normalization followed by elementwise gain and bias (1 x d each).
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);
// 1 x cols mean over rows.
Var mean_rows(Var a);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
// out.row(r) = table.row(ids[r]); gradients scatter-add back into the table.
Var gather_rows(Var table, const std::vector<int>& ids);
Var concat_cols(const std::vector<Var>& parts);
// 1x1 sum of all entries.
Var sum(Var a);
// 1x1 sum over rows of -log softmax(logits.row(r))[targets[r]].
Var cross_entropy_rows(Var logits, const std::vector<int>& targets);
// 1x1 sum of |pred - target| over rows whose mask entry is true.
Var l1_rows(Var pred, const Matrix& target, const std::vector<bool>& mask);

}  // namespace mmfsod::ag
