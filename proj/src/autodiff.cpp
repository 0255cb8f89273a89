#include "skd/autodiff.hpp"

#include <cmath>
#include <string>

#include "skd/errors.hpp"

namespace skd {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Affine: return "affine";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Relu: return "relu";
    case OpKind::Softplus: return "softplus";
    case OpKind::Tanh: return "tanh";
    case OpKind::Abs: return "abs";
    case OpKind::Square: return "square";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::Sum: return "sum";
    case OpKind::SumCols: return "sum_cols";
    case OpKind::Mean: return "mean";
    case OpKind::MaxAll: return "max_all";
    case OpKind::MinAll: return "min_all";
    case OpKind::MinConst: return "min_const";
    case OpKind::RowMax: return "row_max";
    case OpKind::RowMin: return "row_min";
    case OpKind::SmoothL1: return "smooth_l1";
    case OpKind::GradGate: return "grad_gate";
  }
  return "?";
}

double smooth_l1_scalar(double d) {
  const double a = std::fabs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double softplus_scalar(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// d/dd of SmoothL1. At |d| == 1 the linear branch applies; both one-sided
// derivatives are +-1 there, so the choice is immaterial.
double smooth_l1_grad(double d) {
  if (d >= 1.0) return 1.0;
  if (d <= -1.0) return -1.0;
  return d;
}

Tape& same_tape(Var a, Var b) {
  SKD_REQUIRE(a.valid() && b.valid() && a.tape() == b.tape(), "operands live on different tapes");
  return *a.tape();
}

enum class Bc { Same, BScalar, AScalar, BRow, ARow };

Bc broadcast_mode(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bc::Same;
  if (b.numel() == 1) return Bc::BScalar;
  if (a.numel() == 1) return Bc::AScalar;
  if (a.rank() == 2 && b.numel() == a.cols() && (b.rank() == 1 || b.rows() == 1)) return Bc::BRow;
  if (b.rank() == 2 && a.numel() == b.cols() && (a.rank() == 1 || a.rows() == 1)) return Bc::ARow;
  throw ContractViolation("incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
}

struct BcIndex {
  Bc mode;
  std::size_t n;  // row length for row broadcasts
  std::size_t a(std::size_t i) const {
    switch (mode) {
      case Bc::AScalar: return 0;
      case Bc::ARow: return i % n;
      default: return i;
    }
  }
  std::size_t b(std::size_t i) const {
    switch (mode) {
      case Bc::BScalar: return 0;
      case Bc::BRow: return i % n;
      default: return i;
    }
  }
};

template <class F, class DA, class DB>
Var binary(OpKind kind, Var a, Var b, F f, DA dfa, DB dfb) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bc mode = broadcast_mode(av, bv);
  const bool b_big = mode == Bc::AScalar || mode == Bc::ARow;
  const Shape out_shape = b_big ? bv.shape() : av.shape();
  const BcIndex ix{mode, b_big ? bv.cols() : av.cols()};
  Tensor out(out_shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(av[ix.a(i)], bv[ix.b(i)]);
  const int ia = a.id(), ib = b.id();
  return tape.push(kind, {ia, ib}, std::move(out), [ia, ib, ix, dfa, dfb](Tape& t, int self) {
    const Tensor& g = t.incoming(self);
    const Tensor& x = t.node(ia).value;
    const Tensor& y = t.node(ib).value;
    const Tensor& z = t.node(self).value;
    if (t.node(ia).requires_grad) {
      Tensor& ga = t.grad_of(ia);
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga[ix.a(i)] += g[i] * dfa(x[ix.a(i)], y[ix.b(i)], z[i]);
    }
    if (t.node(ib).requires_grad) {
      Tensor& gb = t.grad_of(ib);
      for (std::size_t i = 0; i < g.numel(); ++i)
        gb[ix.b(i)] += g[i] * dfb(x[ix.a(i)], y[ix.b(i)], z[i]);
    }
  });
}

// df receives (input, output).
template <class F, class DF>
Var unary(OpKind kind, Var a, F f, DF df) {
  SKD_REQUIRE(a.valid(), "invalid operand");
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(av[i]);
  const int ia = a.id();
  return a.tape()->push(kind, {ia}, std::move(out), [ia, df](Tape& t, int self) {
    const Tensor& g = t.incoming(self);
    const Tensor& x = t.node(ia).value;
    const Tensor& y = t.node(self).value;
    Tensor& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

std::size_t arg_extreme(const Tensor& v, bool want_max) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.numel(); ++i)
    if (want_max ? v[i] > v[best] : v[i] < v[best]) best = i;
  return best;
}

}  // namespace

const Tensor& Var::value() const {
  SKD_REQUIRE(valid(), "value() on an unbound Var");
  return tape_->node(id_).value;
}

Tensor Gradients::at(int id) const {
  const Tensor& g = grads_.at(id);
  if (!g.empty()) return g;
  return Tensor(tape_->node(id).value.shape());
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{OpKind::Leaf, {}, std::move(value), true, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::Leaf, {}, std::move(value), false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::push(OpKind kind, std::vector<int> inputs, Tensor value, BackwardFn backward) {
  bool rg = false;
  for (int in : inputs) rg = rg || nodes_[in].requires_grad;
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), rg,
                        rg ? std::move(backward) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_of(int id) {
  Tensor& g = grads_[id];
  if (g.empty()) g = Tensor(nodes_[id].value.shape());
  return g;
}

Gradients Tape::backward(Var loss) {
  SKD_REQUIRE(loss.tape() == this, "loss belongs to another tape");
  SKD_REQUIRE(loss.numel() == 1, "backward needs a scalar loss, got shape " +
                                     shape_str(loss.shape()));
  const int root = loss.id();
  for (int id = 0; id <= root; ++id) {
    if (!nodes_[id].value.all_finite())
      throw NumericError("non-finite forward value at node " + std::to_string(id) + " (" +
                         std::string(op_name(nodes_[id].kind)) + ")");
  }
  grads_.assign(nodes_.size(), Tensor{});
  grads_[root] = Tensor(nodes_[root].value.shape(), 1.0);
  for (int id = root; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (grads_[id].empty() || !n.requires_grad || !n.backward) continue;
    n.backward(*this, id);
  }
  Gradients out(this, std::move(grads_));
  grads_.clear();
  return out;
}

Gradients backward_gradients(Tape& tape, Var loss) { return tape.backward(loss); }

Var add(Var a, Var b) {
  return binary(
      OpKind::Add, a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      OpKind::Sub, a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      OpKind::Mul, a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      OpKind::Div, a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Var neg(Var a) {
  return unary(
      OpKind::Neg, a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var affine(Var a, double scale, double shift) {
  return unary(
      OpKind::Affine, a, [scale, shift](double x) { return scale * x + shift; },
      [scale](double, double) { return scale; });
}

Var exp(Var a) {
  return unary(
      OpKind::Exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(
      OpKind::Log, a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary(
      OpKind::Sqrt, a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Var relu(Var a) {
  return unary(
      OpKind::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softplus(Var a) {
  return unary(
      OpKind::Softplus, a, softplus_scalar, [](double x, double) { return sigmoid(x); });
}

Var tanh(Var a) {
  return unary(
      OpKind::Tanh, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var abs(Var a) {
  return unary(
      OpKind::Abs, a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary(
      OpKind::Square, a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Var min_const(Var a, double c) {
  return unary(
      OpKind::MinConst, a, [c](double x) { return x <= c ? x : c; },
      [c](double x, double) { return x <= c ? 1.0 : 0.0; });
}

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  SKD_REQUIRE(A.rank() == 2 && B.rank() == 2 && A.cols() == B.rows(),
              "matmul shape mismatch " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &C[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  const int ia = a.id(), ib = b.id();
  return tape.push(OpKind::MatMul, {ia, ib}, std::move(C), [ia, ib, m, k, n](Tape& t, int self) {
    const Tensor& G = t.incoming(self);
    const Tensor& A = t.node(ia).value;
    const Tensor& B = t.node(ib).value;
    if (t.node(ia).requires_grad) {
      Tensor& gA = t.grad_of(ia);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &G[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = &B[p * n];
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          gA[i * k + p] += s;
        }
      }
    }
    if (t.node(ib).requires_grad) {
      Tensor& gB = t.grad_of(ib);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &G[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = &gB[p * n];
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  SKD_REQUIRE(A.rank() == 2, "transpose needs a matrix");
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  const int ia = a.id();
  return a.tape()->push(OpKind::Transpose, {ia}, std::move(out), [ia, m, n](Tape& t, int self) {
    const Tensor& g = t.incoming(self);
    Tensor& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id();
  return a.tape()->push(OpKind::Reshape, {ia}, std::move(out), [ia](Tape& t, int self) {
    const Tensor& g = t.incoming(self);
    Tensor& ga = t.grad_of(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  SKD_REQUIRE(!parts.empty(), "concat of nothing");
  Tape* tape = parts.front().tape();
  const std::size_t rank = parts.front().value().rank();
  SKD_REQUIRE(rank == 1 || rank == 2, "concat supports rank 1 and 2");
  SKD_REQUIRE(axis == 0 || (rank == 2 && axis == 1), "bad concat axis");
  std::vector<int> ids;
  for (const Var& p : parts) {
    SKD_REQUIRE(p.tape() == tape && p.value().rank() == rank, "concat operands disagree");
    ids.push_back(p.id());
  }
  if (rank == 1 || axis == 0) {
    // Row-major layout makes these a plain append.
    std::size_t total = 0, cols = parts.front().value().cols();
    std::vector<double> data;
    for (const Var& p : parts) {
      if (rank == 2) SKD_REQUIRE(p.value().cols() == cols, "concat column mismatch");
      total += rank == 2 ? p.value().rows() : p.numel();
      data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    }
    Shape shape = rank == 1 ? Shape{total} : Shape{total, cols};
    return tape->push(OpKind::Concat, ids, Tensor(std::move(shape), std::move(data)),
                      [ids](Tape& t, int self) {
                        const Tensor& g = t.incoming(self);
                        std::size_t off = 0;
                        for (int id : ids) {
                          const std::size_t n = t.node(id).value.numel();
                          if (t.node(id).requires_grad) {
                            Tensor& gi = t.grad_of(id);
                            for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
                          }
                          off += n;
                        }
                      });
  }
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    SKD_REQUIRE(p.value().rows() == rows, "concat row mismatch");
    total += p.value().cols();
  }
  Tensor out(Shape{rows, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out[r * total + off + c] = v[r * v.cols() + c];
    off += v.cols();
  }
  return tape->push(OpKind::Concat, ids, std::move(out), [ids, rows, total](Tape& t, int self) {
    const Tensor& g = t.incoming(self);
    std::size_t off = 0;
    for (int id : ids) {
      const std::size_t c = t.node(id).value.cols();
      if (t.node(id).requires_grad) {
        Tensor& gi = t.grad_of(id);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gi[r * c + j] += g[r * total + off + j];
      }
      off += c;
    }
  });
}

Var slice(Var a, int axis, std::size_t start, std::size_t len) {
  const Tensor& A = a.value();
  SKD_REQUIRE(A.rank() == 1 || A.rank() == 2, "slice supports rank 1 and 2");
  const bool by_cols = (A.rank() == 1 && axis == 0) || (A.rank() == 2 && axis == 1);
  SKD_REQUIRE(by_cols || (A.rank() == 2 && axis == 0), "bad slice axis");
  const std::size_t rows = A.rows(), cols = A.cols();
  const std::size_t extent = by_cols ? cols : rows;
  SKD_REQUIRE(start + len <= extent, "slice out of range");
  const int ia = a.id();
  if (!by_cols) {
    std::vector<double> data(A.data().begin() + start * cols,
                             A.data().begin() + (start + len) * cols);
    return a.tape()->push(OpKind::Slice, {ia}, Tensor(Shape{len, cols}, std::move(data)),
                          [ia, start, cols](Tape& t, int self) {
                            const Tensor& g = t.incoming(self);
                            Tensor& ga = t.grad_of(ia);
                            for (std::size_t i = 0; i < g.numel(); ++i) ga[start * cols + i] += g[i];
                          });
  }
  Tensor out(A.rank() == 1 ? Shape{len} : Shape{rows, len});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < len; ++c) out[r * len + c] = A[r * cols + start + c];
  return a.tape()->push(OpKind::Slice, {ia}, std::move(out),
                        [ia, start, len, rows, cols](Tape& t, int self) {
                          const Tensor& g = t.incoming(self);
                          Tensor& ga = t.grad_of(ia);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < len; ++c)
                              ga[r * cols + start + c] += g[r * len + c];
                        });
}

Var softmax_rows(Var a) {
  const Tensor& A = a.value();
  SKD_REQUIRE(A.rank() == 1 || A.rank() == 2, "softmax_rows needs rank 1 or 2");
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out(A.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const double* x = &A[r * n];
    double* y = &out[r * n];
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  const int ia = a.id();
  return a.tape()->push(OpKind::SoftmaxRows, {ia}, std::move(out), [ia, m, n](Tape& t, int self) {
    const Tensor& g = t.incoming(self);
    const Tensor& y = t.node(self).value;
    Tensor& ga = t.grad_of(ia);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const int ia = a.id();
  return a.tape()->push(OpKind::Sum, {ia}, Tensor::scalar(s), [ia](Tape& t, int self) {
    const double g = t.incoming(self)[0];
    Tensor& ga = t.grad_of(ia);
    for (auto& v : ga.data()) v += g;
  });
}

Var sum_cols(Var a) {
  const Tensor& A = a.value();
  SKD_REQUIRE(A.rank() == 2, "sum_cols needs a matrix");
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out(Shape{m});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r] += A[r * n + j];
  const int ia = a.id();
  return a.tape()->push(OpKind::SumCols, {ia}, std::move(out), [ia, m, n](Tape& t, int self) {
    const Tensor& g = t.incoming(self);
    Tensor& ga = t.grad_of(ia);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r];
  });
}

Var mean(Var a) {
  const std::size_t n = a.numel();
  SKD_REQUIRE(n > 0, "mean of empty tensor");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const int ia = a.id();
  return a.tape()->push(OpKind::Mean, {ia}, Tensor::scalar(s / static_cast<double>(n)),
                        [ia, n](Tape& t, int self) {
                          const double g = t.incoming(self)[0] / static_cast<double>(n);
                          Tensor& ga = t.grad_of(ia);
                          for (auto& v : ga.data()) v += g;
                        });
}

namespace {
Var extreme_all(Var a, bool want_max) {
  SKD_REQUIRE(a.numel() > 0, "reduction of empty tensor");
  const std::size_t idx = arg_extreme(a.value(), want_max);
  const int ia = a.id();
  return a.tape()->push(want_max ? OpKind::MaxAll : OpKind::MinAll, {ia},
                        Tensor::scalar(a.value()[idx]), [ia, idx](Tape& t, int self) {
                          t.grad_of(ia)[idx] += t.incoming(self)[0];
                        });
}
}  // namespace

Var max_all(Var a) { return extreme_all(a, true); }
Var min_all(Var a) { return extreme_all(a, false); }

namespace {
Var row_extreme(Var a, bool want_max) {
  const Tensor& A = a.value();
  SKD_REQUIRE(A.rank() == 2 && A.cols() > 0, "row reduction needs a non-empty matrix");
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out(Shape{m});
  std::vector<std::size_t> idx(m);
  for (std::size_t r = 0; r < m; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      const double v = A[r * n + j], b = A[r * n + best];
      if (want_max ? v > b : v < b) best = j;
    }
    idx[r] = r * n + best;
    out[r] = A[idx[r]];
  }
  const int ia = a.id();
  return a.tape()->push(want_max ? OpKind::RowMax : OpKind::RowMin, {ia}, std::move(out),
                        [ia, idx = std::move(idx)](Tape& t, int self) {
                          const Tensor& g = t.incoming(self);
                          Tensor& ga = t.grad_of(ia);
                          for (std::size_t r = 0; r < idx.size(); ++r) ga[idx[r]] += g[r];
                        });
}
}  // namespace

Var row_max(Var a) { return row_extreme(a, true); }
Var row_min(Var a) { return row_extreme(a, false); }

Var smooth_l1(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  SKD_REQUIRE(a.shape() == b.shape(), "smooth_l1 shape mismatch " + shape_str(a.shape()) +
                                          " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  SKD_REQUIRE(n > 0, "smooth_l1 of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += smooth_l1_scalar(a.value()[i] - b.value()[i]);
  const int ia = a.id(), ib = b.id();
  return tape.push(OpKind::SmoothL1, {ia, ib}, Tensor::scalar(s / static_cast<double>(n)),
                   [ia, ib, n](Tape& t, int self) {
                     const double g = t.incoming(self)[0] / static_cast<double>(n);
                     const Tensor& x = t.node(ia).value;
                     const Tensor& y = t.node(ib).value;
                     const bool ga_on = t.node(ia).requires_grad;
                     const bool gb_on = t.node(ib).requires_grad;
                     for (std::size_t i = 0; i < n; ++i) {
                       const double d = g * smooth_l1_grad(x[i] - y[i]);
                       if (ga_on) t.grad_of(ia)[i] += d;
                       if (gb_on) t.grad_of(ib)[i] -= d;
                     }
                   });
}

Var grad_gate(Var x, double factor) {
  SKD_REQUIRE(std::isfinite(factor) && factor >= 0.0,
              "gate factor must be finite and nonnegative, got " + std::to_string(factor));
  const int ix = x.id();
  return x.tape()->push(OpKind::GradGate, {ix}, x.value(), [ix, factor](Tape& t, int self) {
    const Tensor& g = t.incoming(self);
    Tensor& gx = t.grad_of(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * factor;
  });
}

}  // namespace skd
