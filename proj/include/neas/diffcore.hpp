#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Graph is built fresh for every evaluation: each op appends one node whose
// value is computed eagerly, and backward() walks the nodes in reverse
// creation order. Trainable state lives in ParamTensor objects owned outside
// the graph; backward accumulates into their grad buffers.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "neas/error.hpp"

namespace neas {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Shape {
  Index rows = 0;
  Index cols = 0;

  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const { return concat('[', rows, 'x', cols, ']'); }
};

inline Shape shape_of(const Matrix& m) { return {m.rows(), m.cols()}; }

/// A trainable dense value. The gradient buffer has the same shape as the
/// value and accumulates across backward passes until zero_grad().
class ParamTensor {
 public:
  ParamTensor() = default;
  ParamTensor(std::string name, Matrix value, bool requires_grad = true)
      : name_(std::move(name)),
        value_(std::move(value)),
        grad_(Matrix::Zero(value_.rows(), value_.cols())),
        requires_grad_(requires_grad) {}

  const std::string& name() const { return name_; }
  const Matrix& value() const { return value_; }
  Matrix& value() { return value_; }
  const Matrix& grad() const { return grad_; }
  Matrix& grad() { return grad_; }
  Shape shape() const { return shape_of(value_); }
  Index size() const { return value_.size(); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  void zero_grad() { grad_.setZero(value_.rows(), value_.cols()); }

  /// Replace the value; the gradient buffer is resized and cleared.
  void assign(Matrix value) {
    value_ = std::move(value);
    zero_grad();
  }

 private:
  std::string name_;
  Matrix value_;
  Matrix grad_;
  bool requires_grad_ = true;
};

/// Handle to a node inside a Graph.
struct Var {
  static constexpr std::uint32_t npos = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = npos;
  bool valid() const { return id != npos; }
};

class Graph {
 public:
  /// Adjoint of one primitive: receives the gradient of the output and
  /// pushes contributions into its inputs through Graph::accumulate.
  using Adjoint = std::function<void(Graph&, const Matrix& out_grad)>;

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // -- leaves -------------------------------------------------------------

  Var param(ParamTensor& p) {
    Node n;
    n.op = "param";
    n.value = p.value();
    n.param = &p;
    n.needs_grad = p.requires_grad();
    n.leaf = true;
    return push(std::move(n));
  }

  Var constant(Matrix value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    n.leaf = true;
    return push(std::move(n));
  }

  Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  // -- introspection ------------------------------------------------------

  const Matrix& value(Var v) const { return node(v).value; }
  double item(Var v) const {
    const Matrix& m = value(v);
    if (m.size() != 1) throw ShapeError(concat("item(): expected a scalar, got ", shape_of(m).str()));
    return m(0, 0);
  }
  Shape shape(Var v) const { return shape_of(node(v).value); }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  std::string_view op_name(Var v) const { return node(v).op; }

  /// Gradient of the last backward() output w.r.t. this node (zeros if the
  /// node did not participate).
  Matrix grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t primitive_count() const {
    std::size_t count = 0;
    for (const Node& n : nodes_) count += n.leaf ? 0 : 1;
    return count;
  }

  /// Node ids visited by the most recent backward(), in visit order.
  const std::vector<std::uint32_t>& last_backward_order() const { return visit_order_; }

  /// Seeds d(out)/d(out) = 1 and runs every adjoint in reverse creation
  /// order; parameter leaves then add their gradient into ParamTensor::grad.
  /// Returns the number of adjoint steps performed. Primitives with no
  /// differentiable input are pruned and not counted.
  std::size_t backward(Var out) {
    Node& root = node(out);
    if (root.value.size() != 1) {
      throw ShapeError(concat("backward(): output must be a scalar, got ", shape_of(root.value).str()));
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    visit_order_.clear();
    root.grad = Matrix::Ones(1, 1);

    std::size_t steps = 0;
    for (std::uint32_t id = out.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.leaf || !n.needs_grad || n.grad.size() == 0) continue;
      visit_order_.push_back(id);
      // Adjoints only touch the grads of earlier nodes, so n stays valid.
      n.adjoint(*this, n.grad);
      ++steps;
    }
    for (Node& n : nodes_) {
      if (n.leaf && n.param != nullptr && n.needs_grad && n.grad.size() != 0) n.param->grad() += n.grad;
    }
    return steps;
  }

  /// Adds `contribution` into the gradient of `v` if it participates.
  template <typename Expr>
  void accumulate(Var v, const Expr& contribution) {
    Node& n = node(v);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = contribution;
    } else {
      n.grad += contribution;
    }
  }

  /// Mutable gradient buffer for scatter-style adjoints; allocated as zeros.
  Matrix& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Registers an op whose value was computed by the caller.
  Var custom(std::string_view op, std::vector<Var> inputs, Matrix value, Adjoint adjoint) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.adjoint = std::move(adjoint);
    for (Var in : n.inputs) n.needs_grad = n.needs_grad || node(in).needs_grad;
    return push(std::move(n));
  }

  // -- linear algebra -----------------------------------------------------

  Var matmul(Var a, Var b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa.cols != sb.rows) {
      throw ShapeError(concat("matmul: inner dimensions differ, lhs ", sa.str(), " rhs ", sb.str()));
    }
    Matrix out = value(a) * value(b);
    return custom("matmul", {a, b}, std::move(out), [a, b](Graph& g, const Matrix& go) {
      if (g.needs_grad(a)) g.accumulate(a, go * g.value(b).transpose());
      if (g.needs_grad(b)) g.accumulate(b, g.value(a).transpose() * go);
    });
  }

  /// a + row, with the 1×n row broadcast over every row of a.
  Var add_row(Var a, Var row) {
    const Shape sa = shape(a), sr = shape(row);
    if (sr.rows != 1 || sr.cols != sa.cols) {
      throw ShapeError(concat("add_row: expected row of shape [1x", sa.cols, "], got ", sr.str()));
    }
    Matrix out = value(a).rowwise() + value(row).row(0);
    return custom("add_row", {a, row}, std::move(out), [a, row](Graph& g, const Matrix& go) {
      g.accumulate(a, go);
      if (g.needs_grad(row)) g.accumulate(row, go.colwise().sum());
    });
  }

  Var add(Var a, Var b) {
    same_shape("add", a, b);
    return custom("add", {a, b}, value(a) + value(b), [a, b](Graph& g, const Matrix& go) {
      g.accumulate(a, go);
      g.accumulate(b, go);
    });
  }

  Var sub(Var a, Var b) {
    same_shape("sub", a, b);
    return custom("sub", {a, b}, value(a) - value(b), [a, b](Graph& g, const Matrix& go) {
      g.accumulate(a, go);
      if (g.needs_grad(b)) g.accumulate(b, -go);
    });
  }

  /// Elementwise product.
  Var mul(Var a, Var b) {
    same_shape("mul", a, b);
    Matrix out = value(a).cwiseProduct(value(b));
    return custom("mul", {a, b}, std::move(out), [a, b](Graph& g, const Matrix& go) {
      if (g.needs_grad(a)) g.accumulate(a, go.cwiseProduct(g.value(b)));
      if (g.needs_grad(b)) g.accumulate(b, go.cwiseProduct(g.value(a)));
    });
  }

  /// Matrix times a 1×1 variable.
  Var mul_scalar(Var a, Var s) {
    if (shape(s) != Shape{1, 1}) throw ShapeError(concat("mul_scalar: expected [1x1] scalar, got ", shape(s).str()));
    Matrix out = value(a) * value(s)(0, 0);
    return custom("mul_scalar", {a, s}, std::move(out), [a, s](Graph& g, const Matrix& go) {
      if (g.needs_grad(a)) g.accumulate(a, go * g.value(s)(0, 0));
      if (g.needs_grad(s)) g.accumulate(s, Matrix::Constant(1, 1, go.cwiseProduct(g.value(a)).sum()));
    });
  }

  Var scale(Var a, double k) {
    return custom("scale", {a}, value(a) * k, [a, k](Graph& g, const Matrix& go) { g.accumulate(a, go * k); });
  }

  Var shift(Var a, double k) {
    Matrix out = value(a).array() + k;
    return custom("shift", {a}, std::move(out), [a](Graph& g, const Matrix& go) { g.accumulate(a, go); });
  }

  Var neg(Var a) { return scale(a, -1.0); }

  /// Elementwise product with a constant matrix of the same shape.
  Var mul_const(Var a, const Matrix& c) {
    if (shape(a) != shape_of(c)) {
      throw ShapeError(concat("mul_const: shapes differ, ", shape(a).str(), " vs ", shape_of(c).str()));
    }
    Matrix out = value(a).cwiseProduct(c);
    return custom("mul_const", {a}, std::move(out), [a, c](Graph& g, const Matrix& go) { g.accumulate(a, go.cwiseProduct(c)); });
  }

  // -- elementwise nonlinearities -----------------------------------------

  Var sin(Var a) {
    Matrix out = value(a).array().sin();
    return custom("sin", {a}, std::move(out), [a](Graph& g, const Matrix& go) {
      g.accumulate(a, go.cwiseProduct(Matrix(g.value(a).array().cos())));
    });
  }

  Var cos(Var a) {
    Matrix out = value(a).array().cos();
    return custom("cos", {a}, std::move(out), [a](Graph& g, const Matrix& go) {
      g.accumulate(a, -go.cwiseProduct(Matrix(g.value(a).array().sin())));
    });
  }

  Var exp(Var a) {
    Matrix out = value(a).array().exp();
    return custom("exp", {a}, std::move(out), [a, self = next_id()](Graph& g, const Matrix& go) {
      g.accumulate(a, go.cwiseProduct(g.value(Var{self})));
    });
  }

  Var sigmoid(Var a) {
    Matrix out = value(a).unaryExpr(&stable_sigmoid);
    return custom("sigmoid", {a}, std::move(out), [a, self = next_id()](Graph& g, const Matrix& go) {
      const Matrix& y = g.value(Var{self});
      g.accumulate(a, go.cwiseProduct(Matrix(y.array() * (1.0 - y.array()))));
    });
  }

  /// log(1 + exp(beta·x)) / beta.
  Var softplus(Var a, double beta = 1.0) {
    Matrix out = value(a).unaryExpr([beta](double x) {
      const double z = beta * x;
      return z > 30.0 ? x : std::log1p(std::exp(z)) / beta;
    });
    return custom("softplus", {a}, std::move(out), [a, beta](Graph& g, const Matrix& go) {
      Matrix d = g.value(a).unaryExpr([beta](double x) { return stable_sigmoid(beta * x); });
      g.accumulate(a, go.cwiseProduct(d));
    });
  }

  Var abs(Var a) {
    Matrix out = value(a).cwiseAbs();
    return custom("abs", {a}, std::move(out), [a](Graph& g, const Matrix& go) {
      Matrix sign = g.value(a).unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
      g.accumulate(a, go.cwiseProduct(sign));
    });
  }

  /// max(x, 0).
  Var relu(Var a) {
    Matrix out = value(a).cwiseMax(0.0);
    return custom("relu", {a}, std::move(out), [a](Graph& g, const Matrix& go) {
      Matrix mask = g.value(a).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
      g.accumulate(a, go.cwiseProduct(mask));
    });
  }

  Var square(Var a) {
    Matrix out = value(a).array().square();
    return custom("square", {a}, std::move(out), [a](Graph& g, const Matrix& go) {
      g.accumulate(a, 2.0 * go.cwiseProduct(g.value(a)));
    });
  }

  Var sqrt(Var a) {
    Matrix out = value(a).array().sqrt();
    return custom("sqrt", {a}, std::move(out), [a, self = next_id()](Graph& g, const Matrix& go) {
      Matrix d = g.value(Var{self}).unaryExpr([](double y) { return y > 0.0 ? 0.5 / y : 0.0; });
      g.accumulate(a, go.cwiseProduct(d));
    });
  }

  // -- reductions and reshaping -------------------------------------------

  Var sum(Var a) {
    const Shape s = shape(a);
    return custom("sum", {a}, Matrix::Constant(1, 1, value(a).sum()), [a, s](Graph& g, const Matrix& go) {
      g.accumulate(a, Matrix::Constant(s.rows, s.cols, go(0, 0)));
    });
  }

  Var mean(Var a) {
    const Index n = value(a).size();
    if (n == 0) throw ShapeError("mean: empty input");
    return scale(sum(a), 1.0 / static_cast<double>(n));
  }

  /// Sum over columns: [r×c] -> [r×1].
  Var row_sum(Var a) {
    const Index cols = shape(a).cols;
    Matrix out = value(a).rowwise().sum();
    return custom("row_sum", {a}, std::move(out), [a, cols](Graph& g, const Matrix& go) {
      g.accumulate(a, go.replicate(1, cols));
    });
  }

  Var cols(Var a, Index start, Index count) {
    const Shape s = shape(a);
    if (start < 0 || count < 0 || start + count > s.cols) {
      throw ShapeError(concat("cols: range [", start, ", ", start + count, ") outside ", s.str()));
    }
    Matrix out = value(a).middleCols(start, count);
    return custom("cols", {a}, std::move(out), [a, start, count](Graph& g, const Matrix& go) {
      if (!g.needs_grad(a)) return;
      g.grad_buffer(a).middleCols(start, count) += go;
    });
  }

  Var rows(Var a, Index start, Index count) {
    const Shape s = shape(a);
    if (start < 0 || count < 0 || start + count > s.rows) {
      throw ShapeError(concat("rows: range [", start, ", ", start + count, ") outside ", s.str()));
    }
    Matrix out = value(a).middleRows(start, count);
    return custom("rows", {a}, std::move(out), [a, start, count](Graph& g, const Matrix& go) {
      if (!g.needs_grad(a)) return;
      g.grad_buffer(a).middleRows(start, count) += go;
    });
  }

  Var concat_cols(Var a, Var b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa.rows != sb.rows) throw ShapeError(concat("concat_cols: row counts differ, ", sa.str(), " vs ", sb.str()));
    Matrix out(sa.rows, sa.cols + sb.cols);
    out << value(a), value(b);
    return custom("concat_cols", {a, b}, std::move(out), [a, b, ca = sa.cols, cb = sb.cols](Graph& g, const Matrix& go) {
      if (g.needs_grad(a)) g.accumulate(a, go.leftCols(ca));
      if (g.needs_grad(b)) g.accumulate(b, go.rightCols(cb));
    });
  }

  /// Row-major reinterpretation to [rows×cols].
  Var reshape(Var a, Index rows, Index cols) {
    const Shape s = shape(a);
    if (rows * cols != s.rows * s.cols) {
      throw ShapeError(concat("reshape: cannot view ", s.str(), " as [", rows, 'x', cols, ']'));
    }
    Matrix out = Eigen::Map<const Matrix>(value(a).data(), rows, cols);
    return custom("reshape", {a}, std::move(out), [a, s](Graph& g, const Matrix& go) {
      g.accumulate(a, Eigen::Map<const Matrix>(go.data(), s.rows, s.cols));
    });
  }

  /// Per-element choice: mask != 0 selects a, otherwise b. The mask is a
  /// constant; gradient reaches only the chosen branch.
  Var where(const Matrix& mask, Var a, Var b) {
    same_shape("where", a, b);
    if (shape_of(mask) != shape(a)) {
      throw ShapeError(concat("where: mask shape ", shape_of(mask).str(), " differs from ", shape(a).str()));
    }
    Matrix out = (mask.array() != 0.0).select(value(a), value(b));
    return custom("where", {a, b}, std::move(out), [a, b, mask](Graph& g, const Matrix& go) {
      const auto chosen = (mask.array() != 0.0);
      if (g.needs_grad(a)) g.accumulate(a, Matrix(chosen.select(go, 0.0)));
      if (g.needs_grad(b)) g.accumulate(b, Matrix(chosen.select(0.0, go)));
    });
  }

  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

 private:
  struct Node {
    std::string_view op;
    Matrix value;
    Matrix grad;
    ParamTensor* param = nullptr;
    std::vector<Var> inputs;
    Adjoint adjoint;
    bool needs_grad = false;
    bool leaf = false;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::uint32_t next_id() const { return static_cast<std::uint32_t>(nodes_.size()); }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("Graph: invalid Var");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("Graph: invalid Var");
    return nodes_[v.id];
  }

  void same_shape(std::string_view op, Var a, Var b) const {
    if (shape(a) != shape(b)) {
      throw ShapeError(concat(op, ": shapes differ, expected ", shape(a).str(), ", got ", shape(b).str()));
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> visit_order_;
};

// -- Adam -------------------------------------------------------------------

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Matrix m;
  Matrix v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of `p` from its accumulated gradient.
/// Returns false (and leaves p and state untouched) if the gradient holds a
/// non-finite entry.
inline bool adam_step(ParamTensor& p, AdamState& state, double lr, const AdamOptions& opt = {}) {
  const Matrix& g = p.grad();
  if (!g.allFinite()) {
    log(LogLevel::warn, concat("adam: non-finite gradient in '", p.name(), "', step skipped"));
    return false;
  }
  if (state.m.size() == 0) {
    state.m = Matrix::Zero(g.rows(), g.cols());
    state.v = Matrix::Zero(g.rows(), g.cols());
  }
  if (shape_of(state.m) != p.shape()) {
    throw ShapeError(concat("adam: state shape ", shape_of(state.m).str(), " differs from parameter '", p.name(),
                            "' ", p.shape().str()));
  }
  ++state.step;
  state.m = opt.beta1 * state.m + (1.0 - opt.beta1) * g;
  state.v = opt.beta2 * state.v + (1.0 - opt.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  p.value().array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + opt.eps);
  return true;
}

/// Adam over a fixed set of parameters.
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<ParamTensor*> params, AdamOptions opt = {})
      : params_(std::move(params)), states_(params_.size()), opt_(opt) {}

  /// Applies one update to every parameter and returns the number skipped.
  std::size_t step(double lr) {
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i]->requires_grad()) continue;
      if (!adam_step(*params_[i], states_[i], lr, opt_)) ++skipped;
    }
    return skipped;
  }

  void zero_grad() {
    for (ParamTensor* p : params_) p->zero_grad();
  }

  std::span<ParamTensor* const> params() const { return params_; }
  std::vector<AdamState>& states() { return states_; }
  const std::vector<AdamState>& states() const { return states_; }
  const AdamOptions& options() const { return opt_; }

 private:
  std::vector<ParamTensor*> params_;
  std::vector<AdamState> states_;
  AdamOptions opt_;
};

}  // namespace neas
