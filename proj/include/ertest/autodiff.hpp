#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Graph records every operation in construction order. Each recorded
// operation carries a backward rule that is itself written in terms of graph
// operations, so gradients can be computed either as plain values (the usual
// training path) or as differentiable graph nodes (create_graph = true), which
// is what gradient-based rationale supervision needs.
//
// Broadcasting is limited to: identical shapes, a rank-0 scalar operand, or a
// row vector ([m] or [1,m]) applied to every row of an [n,m] operand.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ertest/errors.hpp"

namespace ertest::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Tensor {
  std::vector<double> data;
  Shape shape;
  std::optional<std::vector<double>> grad;

  Tensor() : data{0.0}, shape{} {}

  Tensor(Shape s, std::vector<double> d) : data(std::move(d)), shape(std::move(s)) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    }
  }

  static Tensor zeros(Shape s) { return full(std::move(s), 0.0); }

  static Tensor full(Shape s, double v) {
    const auto n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double item() const {
    if (data.size() != 1) {
      throw ShapeError("tensor: item() on shape " + shape_str(shape));
    }
    return data[0];
  }

  double operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }

  void zero_grad() { grad = std::vector<double>(data.size(), 0.0); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
};

class Graph;
class BackwardContext;

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const;
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  const std::optional<std::vector<double>>& grad() const { return value().grad; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Returns one gradient per parent; an invalid Var means "no gradient".
using BackwardFn = std::function<std::vector<Var>(BackwardContext&, const Var&)>;

struct Node {
  std::string op;
  Tensor value;
  std::vector<std::size_t> parents;
  BackwardFn backward;
  bool requires_grad = false;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor t, bool requires_grad = true) {
    nodes_.push_back(Node{"leaf", std::move(t), {}, {}, requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor t) { return leaf(std::move(t), false); }

  Var record(std::string op, Tensor value, std::initializer_list<Var> parents,
             BackwardFn backward) {
    Node node{std::move(op), std::move(value), {}, {}, false};
    node.parents.reserve(parents.size());
    for (const Var& p : parents) {
      if (&p.graph() != this) {
        throw Error(node.op + ": operands belong to different graphs");
      }
      node.parents.push_back(p.id());
      node.requires_grad = node.requires_grad || p.requires_grad();
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  Node& node(std::size_t id) { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  // Accumulates d(loss)/d(node) into the grad of every reachable node that
  // requires grad. Repeated calls sum.
  void backward(const Var& loss) {
    auto grads = propagate(loss, nullptr, false);
    for (std::size_t id = 0; id < grads.size(); ++id) {
      if (!grads[id]) continue;
      Tensor& t = nodes_[id].value;
      if (!t.grad) t.grad = std::vector<double>(t.size(), 0.0);
      const auto& g = grads[id]->value().data;
      for (std::size_t i = 0; i < g.size(); ++i) (*t.grad)[i] += g[i];
    }
  }

  // d(out)/d(wrt[i]) as graph values. With create_graph the results are
  // themselves differentiable. Does not touch stored grads.
  std::vector<Var> grad(const Var& out, std::span<const Var> wrt, bool create_graph = false) {
    if (wrt.empty()) return {};
    std::size_t lo = out.id();
    for (const Var& w : wrt) lo = std::min(lo, w.id());
    std::vector<char> relevant(out.id() + 1, 0);
    for (const Var& w : wrt) {
      if (w.id() <= out.id()) relevant[w.id()] = 1;
    }
    for (std::size_t id = lo; id <= out.id(); ++id) {
      if (relevant[id]) continue;
      for (std::size_t p : nodes_[id].parents) {
        if (p >= lo && relevant[p]) {
          relevant[id] = 1;
          break;
        }
      }
    }
    auto grads = propagate(out, &relevant, create_graph);
    std::vector<Var> result;
    result.reserve(wrt.size());
    for (const Var& w : wrt) {
      if (w.id() < grads.size() && grads[w.id()]) {
        result.push_back(*grads[w.id()]);
      } else {
        result.push_back(constant(Tensor::zeros(w.shape())));
      }
    }
    return result;
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      if (n.value.grad) n.value.zero_grad();
    }
  }

 private:
  std::vector<std::optional<Var>> propagate(const Var& out, const std::vector<char>* relevant,
                                            bool create_graph);

  // deque: node references stay valid while backward rules append nodes.
  std::deque<Node> nodes_;
};

inline Graph& Var::graph() const {
  if (!graph_) throw Error("var: use of an unbound variable");
  return *graph_;
}
inline const Tensor& Var::value() const { return graph().node(id_).value; }
inline bool Var::requires_grad() const { return graph().node(id_).requires_grad; }

// Gives backward rules access to their operands. Without create_graph the
// operands are detached copies, so the gradient computation records no
// differentiable history.
class BackwardContext {
 public:
  BackwardContext(Graph& graph, std::size_t id, bool create_graph)
      : graph_(graph), id_(id), create_graph_(create_graph) {}

  Var input(std::size_t i) {
    const std::size_t pid = graph_.node(id_).parents.at(i);
    if (create_graph_) return Var(&graph_, pid);
    return graph_.constant(strip(graph_.node(pid).value));
  }

  Var output() {
    if (create_graph_) return Var(&graph_, id_);
    return graph_.constant(strip(graph_.node(id_).value));
  }

  const Tensor& input_value(std::size_t i) const {
    return graph_.node(graph_.node(id_).parents.at(i)).value;
  }
  const Tensor& output_value() const { return graph_.node(id_).value; }
  Graph& graph() { return graph_; }

 private:
  static Tensor strip(const Tensor& t) { return Tensor(t.shape, t.data); }

  Graph& graph_;
  std::size_t id_;
  bool create_graph_;
};

Var add(const Var& a, const Var& b);

inline std::vector<std::optional<Var>> Graph::propagate(const Var& out,
                                                        const std::vector<char>* relevant,
                                                        bool create_graph) {
  if (&out.graph() != this) throw Error("backward: loss belongs to another graph");
  if (numel(out.shape()) != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(out.shape()));
  }
  const std::size_t count = out.id() + 1;
  std::vector<std::optional<Var>> grads(count);
  if (!nodes_[out.id()].requires_grad) return grads;
  grads[out.id()] = constant(Tensor::full(out.shape(), 1.0));

  auto needed = [&](std::size_t id) {
    return nodes_[id].requires_grad && (!relevant || (*relevant)[id]);
  };

  for (std::size_t k = count; k-- > 0;) {
    if (!grads[k]) continue;
    if (!nodes_[k].backward) continue;
    if (relevant && !(*relevant)[k]) continue;
    BackwardContext ctx(*this, k, create_graph);
    std::vector<Var> parent_grads = nodes_[k].backward(ctx, *grads[k]);
    const std::vector<std::size_t> parents = nodes_[k].parents;
    for (std::size_t i = 0; i < parents.size(); ++i) {
      const std::size_t p = parents[i];
      if (i >= parent_grads.size() || !parent_grads[i].valid() || !needed(p)) continue;
      if (grads[p]) {
        grads[p] = add(*grads[p], parent_grads[i]);
      } else {
        grads[p] = parent_grads[i];
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Operations

Var sum(const Var& x);
Var sum_leading(const Var& x);
Var expand_leading(const Var& v, std::size_t rows);
Var expand_scalar(const Var& s, const Shape& shape);
Var reshape(const Var& x, const Shape& shape);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double c);
Var reciprocal(const Var& x);
Var transpose(const Var& x);
Var embedding_lookup(const Var& table, std::span<const std::size_t> ids);
Var gather_flat(const Var& x, std::span<const std::size_t> indices);

namespace detail {

enum class Broadcast { same, scalar, rows };

inline Broadcast broadcast_kind(const std::string& op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::same;
  if (b.empty()) return Broadcast::scalar;
  if (a.size() == 2 &&
      ((b.size() == 1 && b[0] == a[1]) || (b.size() == 2 && b[0] == 1 && b[1] == a[1]))) {
    return Broadcast::rows;
  }
  throw ShapeError(op + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not conform");
}

inline std::size_t bcast_index(Broadcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::same: return i;
    case Broadcast::scalar: return 0;
    case Broadcast::rows: return i % cols;
  }
  return i;
}

// Sums a gradient shaped like the broadcast result back to the operand shape.
inline Var reduce_to(const Var& g, Broadcast kind, const Shape& shape) {
  switch (kind) {
    case Broadcast::same: return g;
    case Broadcast::scalar: return sum(g);
    case Broadcast::rows: {
      Var r = sum_leading(g);
      return r.shape() == shape ? r : reshape(r, shape);
    }
  }
  return g;
}

template <class F>
Tensor binary_map(const std::string& op, const Tensor& a, const Tensor& b, Broadcast kind, F f) {
  Tensor out = Tensor::zeros(a.shape);
  const std::size_t cols = a.rank() == 2 ? a.cols() : 1;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data[i] = f(a.data[i], b.data[bcast_index(kind, i, cols)]);
  }
  (void)op;
  return out;
}

template <class F>
Tensor unary_map(const Tensor& x, F f) {
  Tensor out = Tensor::zeros(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x.data[i]);
  return out;
}

inline void require_rank(const std::string& op, const Var& x, std::size_t rank) {
  if (x.shape().size() != rank) {
    throw ShapeError(op + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(x.shape()));
  }
}

}  // namespace detail

inline Var add(const Var& a_in, const Var& b_in) {
  const bool swap = a_in.shape().empty() && !b_in.shape().empty();
  const Var& a = swap ? b_in : a_in;
  const Var& b = swap ? a_in : b_in;
  const auto kind = detail::broadcast_kind("add", a.shape(), b.shape());
  Tensor out = detail::binary_map("add", a.value(), b.value(), kind,
                                  [](double x, double y) { return x + y; });
  const Shape b_shape = b.shape();
  return a.graph().record("add", std::move(out), {a, b},
                          [kind, b_shape](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {g, detail::reduce_to(g, kind, b_shape)};
                          });
}

inline Var sub(const Var& a, const Var& b) {
  const auto kind = detail::broadcast_kind("sub", a.shape(), b.shape());
  Tensor out = detail::binary_map("sub", a.value(), b.value(), kind,
                                  [](double x, double y) { return x - y; });
  const Shape b_shape = b.shape();
  return a.graph().record("sub", std::move(out), {a, b},
                          [kind, b_shape](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {g, detail::reduce_to(scale(g, -1.0), kind, b_shape)};
                          });
}

inline Var mul(const Var& a_in, const Var& b_in) {
  const bool swap = a_in.shape().empty() && !b_in.shape().empty();
  const Var& a = swap ? b_in : a_in;
  const Var& b = swap ? a_in : b_in;
  const auto kind = detail::broadcast_kind("mul", a.shape(), b.shape());
  Tensor out = detail::binary_map("mul", a.value(), b.value(), kind,
                                  [](double x, double y) { return x * y; });
  const Shape b_shape = b.shape();
  return a.graph().record(
      "mul", std::move(out), {a, b},
      [kind, b_shape](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
        Var ga = mul(g, ctx.input(1));
        Var gb = detail::reduce_to(mul(g, ctx.input(0)), kind, b_shape);
        return {ga, gb};
      });
}

inline Var div(const Var& a, const Var& b) { return mul(a, reciprocal(b)); }

inline Var scale(const Var& x, double c) {
  Tensor out = detail::unary_map(x.value(), [c](double v) { return c * v; });
  return x.graph().record("scale", std::move(out), {x},
                          [c](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {scale(g, c)};
                          });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

inline Var add_scalar(const Var& x, double c) {
  Tensor out = detail::unary_map(x.value(), [c](double v) { return v + c; });
  return x.graph().record("add_scalar", std::move(out), {x},
                          [](BackwardContext&, const Var& g) -> std::vector<Var> { return {g}; });
}

inline Var exp(const Var& x) {
  Tensor out = detail::unary_map(x.value(), [](double v) { return std::exp(v); });
  return x.graph().record("exp", std::move(out), {x},
                          [](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            return {mul(g, ctx.output())};
                          });
}

inline Var log(const Var& x) {
  Tensor out = detail::unary_map(x.value(), [](double v) { return std::log(v); });
  return x.graph().record("log", std::move(out), {x},
                          [](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            return {mul(g, reciprocal(ctx.input(0)))};
                          });
}

inline Var reciprocal(const Var& x) {
  Tensor out = detail::unary_map(x.value(), [](double v) { return 1.0 / v; });
  return x.graph().record("reciprocal", std::move(out), {x},
                          [](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            Var y = ctx.output();
                            return {neg(mul(g, mul(y, y)))};
                          });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  Tensor out = detail::unary_map(x.value(), sigmoid_value);
  return x.graph().record("sigmoid", std::move(out), {x},
                          [](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            Var y = ctx.output();
                            return {mul(g, mul(y, add_scalar(neg(y), 1.0)))};
                          });
}

inline Var tanh(const Var& x) {
  Tensor out = detail::unary_map(x.value(), [](double v) { return std::tanh(v); });
  return x.graph().record("tanh", std::move(out), {x},
                          [](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            Var y = ctx.output();
                            return {mul(g, add_scalar(neg(mul(y, y)), 1.0))};
                          });
}

inline Var abs(const Var& x) {
  Tensor out = detail::unary_map(x.value(), [](double v) { return std::abs(v); });
  return x.graph().record("abs", std::move(out), {x},
                          [](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            Tensor sign = detail::unary_map(ctx.input_value(0), [](double v) {
                              return static_cast<double>((v > 0.0) - (v < 0.0));
                            });
                            return {mul(g, ctx.graph().constant(std::move(sign)))};
                          });
}

inline Var relu(const Var& x) {
  Tensor out = detail::unary_map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return x.graph().record("relu", std::move(out), {x},
                          [](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            Tensor step = detail::unary_map(
                                ctx.input_value(0), [](double v) { return v > 0.0 ? 1.0 : 0.0; });
                            return {mul(g, ctx.graph().constant(std::move(step)))};
                          });
}

// Gradient passes where lo <= x <= hi.
inline Var clamp(const Var& x, double lo, double hi) {
  Tensor out = detail::unary_map(x.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return x.graph().record(
      "clamp", std::move(out), {x}, [lo, hi](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
        Tensor mask = detail::unary_map(ctx.input_value(0), [lo, hi](double v) {
          return (v >= lo && v <= hi) ? 1.0 : 0.0;
        });
        return {mul(g, ctx.graph().constant(std::move(mask)))};
      });
}

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(av.shape) + " x " +
                     shape_str(bv.shape));
  }
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv.data[p * m];
      double* orow = &out.data[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return a.graph().record("matmul", std::move(out), {a, b},
                          [](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            Var ga = matmul(g, transpose(ctx.input(1)));
                            Var gb = matmul(transpose(ctx.input(0)), g);
                            return {ga, gb};
                          });
}

inline Var transpose(const Var& x) {
  detail::require_rank("transpose", x, 2);
  const auto& v = x.value();
  const std::size_t n = v.rows(), m = v.cols();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[j * n + i] = v.data[i * m + j];
  return x.graph().record("transpose", std::move(out), {x},
                          [](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {transpose(g)};
                          });
}

inline Var reshape(const Var& x, const Shape& shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const Shape from = x.shape();
  return x.graph().record("reshape", Tensor(shape, x.value().data), {x},
                          [from](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {reshape(g, from)};
                          });
}

inline Var sum(const Var& x) {
  const auto& d = x.value().data;
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  const Shape from = x.shape();
  return x.graph().record("sum", Tensor::scalar(s), {x},
                          [from](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {expand_scalar(g, from)};
                          });
}

inline Var mean(const Var& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Var expand_scalar(const Var& s, const Shape& shape) {
  if (s.size() != 1) throw ShapeError("expand_scalar: operand " + shape_str(s.shape()));
  const Shape from = s.shape();
  return s.graph().record("expand_scalar", Tensor::full(shape, s.value().data[0]), {s},
                          [from](BackwardContext&, const Var& g) -> std::vector<Var> {
                            Var r = sum(g);
                            return {from.empty() ? r : reshape(r, from)};
                          });
}

// [n,m] -> [m], summing over rows.
inline Var sum_leading(const Var& x) {
  detail::require_rank("sum_leading", x, 2);
  const auto& v = x.value();
  const std::size_t n = v.rows(), m = v.cols();
  Tensor out = Tensor::zeros({m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[j] += v.data[i * m + j];
  return x.graph().record("sum_leading", std::move(out), {x},
                          [n](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {expand_leading(g, n)};
                          });
}

// [m] -> [rows,m].
inline Var expand_leading(const Var& v, std::size_t rows) {
  detail::require_rank("expand_leading", v, 1);
  const std::size_t m = v.shape()[0];
  Tensor out = Tensor::zeros({rows, m});
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(v.value().data.begin(), v.value().data.end(), out.data.begin() + i * m);
  return v.graph().record("expand_leading", std::move(out), {v},
                          [](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {sum_leading(g)};
                          });
}

Var expand_last(const Var& v, std::size_t m);

// Sums the last dimension: [n,m] -> [n], [m] -> [].
inline Var sum_last(const Var& x) {
  if (x.shape().size() != 1 && x.shape().size() != 2) {
    throw ShapeError("sum_last: expected rank 1 or 2, got " + shape_str(x.shape()));
  }
  const auto& v = x.value();
  const std::size_t m = v.shape.back();
  const std::size_t n = v.size() / std::max<std::size_t>(m, 1);
  Shape out_shape = v.rank() == 2 ? Shape{n} : Shape{};
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i] += v.data[i * m + j];
  return x.graph().record("sum_last", std::move(out), {x},
                          [m](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {expand_last(g, m)};
                          });
}

// Appends a last dimension of size m: [n] -> [n,m], [] -> [m].
inline Var expand_last(const Var& v, std::size_t m) {
  if (v.shape().size() > 1) throw ShapeError("expand_last: operand " + shape_str(v.shape()));
  const std::size_t n = v.size();
  Shape out_shape = v.shape().empty() ? Shape{m} : Shape{n, m};
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = v.value().data[i];
  return v.graph().record("expand_last", std::move(out), {v},
                          [](BackwardContext&, const Var& g) -> std::vector<Var> {
                            return {sum_last(g)};
                          });
}

namespace detail {
inline void require_softmax_rank(const std::string& op, const Var& x) {
  if (x.shape().size() != 1 && x.shape().size() != 2) {
    throw ShapeError(op + ": expected rank 1 or 2, got " + shape_str(x.shape()));
  }
  if (x.shape().back() == 0) throw ShapeError(op + ": empty last dimension");
}
}  // namespace detail

// Softmax over the last dimension.
inline Var softmax(const Var& x) {
  detail::require_softmax_rank("softmax", x);
  const auto& v = x.value();
  const std::size_t m = v.shape.back();
  const std::size_t n = v.size() / m;
  Tensor out = Tensor::zeros(v.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &v.data[i * m];
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      out.data[i * m + j] = std::exp(row[j] - mx);
      z += out.data[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] /= z;
  }
  return x.graph().record("softmax", std::move(out), {x},
                          [m](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            Var y = ctx.output();
                            Var dot = expand_last(sum_last(mul(g, y)), m);
                            return {mul(y, sub(g, dot))};
                          });
}

inline Var log_softmax(const Var& x) {
  detail::require_softmax_rank("log_softmax", x);
  const auto& v = x.value();
  const std::size_t m = v.shape.back();
  const std::size_t n = v.size() / m;
  Tensor out = Tensor::zeros(v.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &v.data[i * m];
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = row[j] - lse;
  }
  return x.graph().record("log_softmax", std::move(out), {x},
                          [m](BackwardContext& ctx, const Var& g) -> std::vector<Var> {
                            Var p = exp(ctx.output());
                            return {sub(g, mul(p, expand_last(sum_last(g), m)))};
                          });
}

Var scatter_rows(const Var& src, std::span<const std::size_t> ids, std::size_t table_rows);

// Rows of `table` selected by ids: [V,d] -> [n,d].
inline Var embedding_lookup(const Var& table, std::span<const std::size_t> ids) {
  detail::require_rank("embedding_lookup", table, 2);
  const auto& t = table.value();
  const std::size_t rows = t.rows(), d = t.cols();
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) +
                       " out of range for table " + shape_str(t.shape));
    }
    std::copy_n(t.data.begin() + ids[i] * d, d, out.data.begin() + i * d);
  }
  std::vector<std::size_t> kept(ids.begin(), ids.end());
  return table.graph().record(
      "embedding_lookup", std::move(out), {table},
      [kept = std::move(kept), rows](BackwardContext&, const Var& g) -> std::vector<Var> {
        return {scatter_rows(g, kept, rows)};
      });
}

// Adjoint of embedding_lookup: accumulates rows of src into a zero table.
inline Var scatter_rows(const Var& src, std::span<const std::size_t> ids, std::size_t table_rows) {
  detail::require_rank("scatter_rows", src, 2);
  const auto& s = src.value();
  if (s.rows() != ids.size()) throw ShapeError("scatter_rows: id count differs from rows");
  const std::size_t d = s.cols();
  Tensor out = Tensor::zeros({table_rows, d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table_rows) throw ShapeError("scatter_rows: id out of range");
    for (std::size_t j = 0; j < d; ++j) out.data[ids[i] * d + j] += s.data[i * d + j];
  }
  std::vector<std::size_t> kept(ids.begin(), ids.end());
  return src.graph().record("scatter_rows", std::move(out), {src},
                            [kept = std::move(kept)](BackwardContext&, const Var& g) -> std::vector<Var> {
                              return {embedding_lookup(g, kept)};
                            });
}

Var scatter_flat(const Var& src, std::span<const std::size_t> indices, const Shape& shape);

// Elements at flat indices: any shape -> [k].
inline Var gather_flat(const Var& x, std::span<const std::size_t> indices) {
  const auto& v = x.value();
  Tensor out = Tensor::zeros({indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v.size()) {
      throw ShapeError("gather_flat: index " + std::to_string(indices[i]) + " out of range for " +
                       shape_str(v.shape));
    }
    out.data[i] = v.data[indices[i]];
  }
  std::vector<std::size_t> kept(indices.begin(), indices.end());
  const Shape from = v.shape;
  return x.graph().record(
      "gather_flat", std::move(out), {x},
      [kept = std::move(kept), from](BackwardContext&, const Var& g) -> std::vector<Var> {
        return {scatter_flat(g, kept, from)};
      });
}

inline Var scatter_flat(const Var& src, std::span<const std::size_t> indices, const Shape& shape) {
  if (src.size() != indices.size()) throw ShapeError("scatter_flat: index count differs from src");
  Tensor out = Tensor::zeros(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= out.size()) throw ShapeError("scatter_flat: index out of range");
    out.data[indices[i]] += src.value().data[i];
  }
  std::vector<std::size_t> kept(indices.begin(), indices.end());
  return src.graph().record("scatter_flat", std::move(out), {src},
                            [kept = std::move(kept)](BackwardContext&, const Var& g) -> std::vector<Var> {
                              return {gather_flat(g, kept)};
                            });
}

// Mean negative log-likelihood of the targets. logits: [M] with one target,
// or [n,M] with one target per row.
inline Var cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
  detail::require_softmax_rank("cross_entropy", logits);
  const std::size_t m = logits.shape().back();
  const std::size_t rows = logits.size() / m;
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  std::vector<std::size_t> flat(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] >= m) {
      throw ValueError("cross_entropy: target class " + std::to_string(targets[i]) +
                       " outside [0," + std::to_string(m) + ")");
    }
    flat[i] = i * m + targets[i];
  }
  return neg(mean(gather_flat(log_softmax(logits), flat)));
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace ertest::ad
