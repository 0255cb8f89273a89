#pragma once

// Reverse-mode differentiation over small dense tensors.
//
// A Tape records every operation in insertion order. Because inputs always
// exist before the op that consumes them, the node list is already a
// topological order and backward() just walks it in reverse.

#include <functional>
#include <string_view>
#include <vector>

#include "skd/tensor.hpp"

namespace skd {

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Affine,
  Exp,
  Log,
  Sqrt,
  Relu,
  Softplus,
  Tanh,
  Abs,
  Square,
  MatMul,
  Transpose,
  Reshape,
  Concat,
  Slice,
  SoftmaxRows,
  Sum,
  SumCols,
  Mean,
  MaxAll,
  MinAll,
  MinConst,
  RowMax,
  RowMin,
  SmoothL1,
  GradGate,
};

std::string_view op_name(OpKind kind);

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Gradient accumulators for one backward pass. Nodes that received no
// gradient report zeros of their own shape.
class Gradients {
 public:
  Gradients() = default;
  Gradients(const Tape* tape, std::vector<Tensor> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  Tensor at(int id) const;
  Tensor at(Var v) const { return at(v.id()); }
  // True if some gradient actually reached the node.
  bool touched(int id) const { return !grads_.at(id).empty(); }

 private:
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<int> inputs;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Trainable leaf: gradients flow into it.
  Var variable(Tensor value);
  // Constant leaf: never receives gradient.
  Var constant(Tensor value);
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  Var push(OpKind kind, std::vector<int> inputs, Tensor value, BackwardFn backward);

  const Node& node(int id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  // dL/d(node) for every node, L a scalar node. Accumulators start at zero on
  // every call, so repeated calls return identical results.
  Gradients backward(Var loss);

  // Used by backward closures: the accumulator of an input, zero-initialized
  // on first touch. Valid only during backward().
  Tensor& grad_of(int id);
  const Tensor& incoming(int self) const { return grads_[self]; }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Same as tape.backward(loss); named after the operation it implements.
Gradients backward_gradients(Tape& tape, Var loss);

// Elementwise binary ops accept equal shapes, a scalar (numel 1) on either
// side, or a row vector broadcast over the rows of a matrix.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
// scale * a + shift with constant scale and shift.
Var affine(Var a, double scale, double shift = 0.0);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var relu(Var a);
Var softplus(Var a);
Var tanh(Var a);
Var abs(Var a);
Var square(Var a);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
// Rank-1 inputs concatenate end to end; rank-2 inputs along `axis`.
Var concat(const std::vector<Var>& parts, int axis = 0);
// Elements [start, start+len) along `axis` (rank 1: axis 0; rank 2: 0 or 1).
Var slice(Var a, int axis, std::size_t start, std::size_t len);

Var softmax_rows(Var a);
Var sum(Var a);
// Rank-2 m x n -> rank-1 m, summing each row.
Var sum_cols(Var a);
Var mean(Var a);
Var max_all(Var a);
Var min_all(Var a);
// Rank-2 m x n -> rank-1 m: extreme of each row.
Var row_max(Var a);
Var row_min(Var a);
// min(a, c) elementwise. Gradient goes to `a` wherever a <= c.
Var min_const(Var a, double c);
// Mean over elements of SmoothL1(a - b) with unit margin.
Var smooth_l1(Var a, Var b);
// Identity forward; backward multiplies the incoming gradient by `factor`.
Var grad_gate(Var x, double factor);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator+(Var a, double c) { return affine(a, 1.0, c); }
inline Var operator+(double c, Var a) { return affine(a, 1.0, c); }
inline Var operator-(Var a, double c) { return affine(a, 1.0, -c); }
inline Var operator-(double c, Var a) { return affine(a, -1.0, c); }
inline Var operator*(Var a, double c) { return affine(a, c); }
inline Var operator*(double c, Var a) { return affine(a, c); }
inline Var operator/(Var a, double c) { return affine(a, 1.0 / c); }

double smooth_l1_scalar(double d);
double softplus_scalar(double x);

}  // namespace skd
