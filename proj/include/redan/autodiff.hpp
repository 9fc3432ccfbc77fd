#pragma once

// Tape-based reverse-mode differentiation over 2-D double matrices.
//
// A Graph records every primitive application in creation order; backward()
// walks that record once in reverse. Parameters enter a graph through
// Graph::param() and receive their gradients in Tensor::grad().

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "redan/tensor.hpp"

namespace redan {

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kAffine,
  kTanh,
  kSigmoid,
  kRowSoftmax,
  kSumPool,
  kSignedSqrt,
  kL2Normalize,
  kConcat,
  kSlice,
  kTranspose,
  kDropout,
  kEmbedding,
  kCrossEntropy,
  kSum,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRowSoftmax: return "row_softmax";
    case Op::kSumPool: return "sum_pool";
    case Op::kSignedSqrt: return "signed_sqrt";
    case Op::kL2Normalize: return "l2_normalize";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kTranspose: return "transpose";
    case Op::kDropout: return "dropout";
    case Op::kEmbedding: return "embedding";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kSum: return "sum";
  }
  return "?";
}

// Norms below this are treated as zero by l2_normalize.
inline constexpr double kL2NormFloor = 1e-12;
// Added under the square root of the signed-sqrt derivative.
inline constexpr double kSignedSqrtGradEps = 1e-12;

class Graph;

// Handle to one recorded value. Cheap to copy; valid while its Graph lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return g_ != nullptr; }
  Graph* graph() const { return g_; }
  std::uint32_t id() const { return id_; }

  std::size_t rows() const;
  std::size_t cols() const;
  Shape shape() const { return {rows(), cols()}; }
  std::span<const double> value() const;
  double item() const;
  double at(std::size_t r, std::size_t c) const { return value()[r * cols() + c]; }
  Tensor to_tensor() const;

 private:
  friend class Graph;
  Var(Graph* g, std::uint32_t id) : g_(g), id_(id) {}
  Graph* g_ = nullptr;
  std::uint32_t id_ = 0;
};

class Graph {
 public:
  struct Node {
    Op op = Op::kConstant;
    std::size_t rows = 0, cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::uint32_t> inputs;
    std::vector<std::size_t> attrs;
    std::vector<double> saved;
    Tensor* param = nullptr;
    bool needs_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // One leaf per parameter tensor; repeated calls return the same handle so
  // fan-out accumulates inside the graph.
  Var param(Tensor& t) {
    auto it = param_ids_.find(&t);
    if (it != param_ids_.end()) return Var(this, it->second);
    if (t.rank() > 2) throw ShapeError("param: rank > 2 not supported");
    Node n;
    n.op = Op::kLeaf;
    n.rows = t.rows();
    n.cols = t.cols();
    n.value = t.values();
    n.param = &t;
    n.needs_grad = t.requires_grad();
    Var v = push(std::move(n));
    param_ids_.emplace(&t, v.id());
    return v;
  }

  Var constant(const Tensor& t) {
    if (t.rank() > 2) throw ShapeError("constant: rank > 2 not supported");
    return constant(t.rows(), t.cols(), t.values());
  }

  Var constant(std::size_t rows, std::size_t cols, std::vector<double> data) {
    if (rows * cols != data.size())
      throw ShapeError("constant", {rows, cols}, {data.size()});
    Node n;
    n.op = Op::kConstant;
    n.rows = rows;
    n.cols = cols;
    n.value = std::move(data);
    return push(std::move(n));
  }

  Var zeros(std::size_t rows, std::size_t cols) {
    return constant(rows, cols, std::vector<double>(rows * cols, 0.0));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  const Node& node(Var v) const { return nodes_[v.id()]; }

  // Records a new node after validating its forward value.
  Var record(Op op, std::size_t rows, std::size_t cols,
             std::vector<double> value, std::vector<std::uint32_t> inputs,
             std::vector<std::size_t> attrs = {},
             std::vector<double> saved = {}) {
    for (double x : value)
      if (!std::isfinite(x))
        throw NumericError(std::string(op_name(op)) + ": non-finite output");
    Node n;
    n.op = op;
    n.rows = rows;
    n.cols = cols;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.attrs = std::move(attrs);
    n.saved = std::move(saved);
    for (auto i : n.inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    return push(std::move(n));
  }

  void backward(Var loss);

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  void accumulate(std::uint32_t id, std::size_t i, double g) {
    nodes_[id].grad[i] += g;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::uint32_t> param_ids_;
};

inline std::size_t Var::rows() const { return g_->node(id_).rows; }
inline std::size_t Var::cols() const { return g_->node(id_).cols; }
inline std::span<const double> Var::value() const { return g_->node(id_).value; }
inline double Var::item() const {
  const auto& n = g_->node(id_);
  if (n.value.size() != 1) throw ShapeError("item", {n.rows, n.cols}, {1, 1});
  return n.value[0];
}
inline Tensor Var::to_tensor() const {
  const auto& n = g_->node(id_);
  return Tensor({n.rows, n.cols}, n.value);
}

namespace detail {

inline Graph& same_graph(const char* op, Var a, Var b) {
  if (!a.valid() || !b.valid() || a.graph() != b.graph())
    throw PreconditionError(std::string(op) + ": operands from different graphs");
  return *a.graph();
}

inline Graph& graph_of(const char* op, Var a) {
  if (!a.valid()) throw PreconditionError(std::string(op) + ": empty handle");
  return *a.graph();
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------- primitives

inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph("matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw ShapeError("matmul", a.shape(), b.shape());
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return g.record(Op::kMatMul, m, n, std::move(out), {a.id(), b.id()});
}

// b may match a's shape, be a column (rows x 1) broadcast across columns, or a
// row (1 x cols) broadcast across rows.
inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph("add", a, b);
  const std::size_t m = a.rows(), n = a.cols();
  std::size_t mode;
  if (b.rows() == m && b.cols() == n) mode = 0;
  else if (b.rows() == m && b.cols() == 1) mode = 1;
  else if (b.rows() == 1 && b.cols() == n) mode = 2;
  else throw ShapeError("add", a.shape(), b.shape());
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double bb = mode == 0 ? bv[i * n + j] : mode == 1 ? bv[i] : bv[j];
      out[i * n + j] = av[i * n + j] + bb;
    }
  return g.record(Op::kAdd, m, n, std::move(out), {a.id(), b.id()}, {mode});
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::same_graph("sub", a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("sub", a.shape(), b.shape());
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return g.record(Op::kSub, a.rows(), a.cols(), std::move(out), {a.id(), b.id()});
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph("mul", a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mul", a.shape(), b.shape());
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.record(Op::kMul, a.rows(), a.cols(), std::move(out), {a.id(), b.id()});
}

// alpha * a + beta, elementwise.
inline Var affine(Var a, double alpha, double beta = 0.0) {
  Graph& g = detail::graph_of("affine", a);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * av[i] + beta;
  return g.record(Op::kAffine, a.rows(), a.cols(), std::move(out), {a.id()}, {},
                  {alpha, beta});
}

inline Var tanh(Var a) {
  Graph& g = detail::graph_of("tanh", a);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  return g.record(Op::kTanh, a.rows(), a.cols(), std::move(out), {a.id()});
}

inline Var sigmoid(Var a) {
  Graph& g = detail::graph_of("sigmoid", a);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = detail::stable_sigmoid(av[i]);
  return g.record(Op::kSigmoid, a.rows(), a.cols(), std::move(out), {a.id()});
}

inline Var row_softmax(Var a) {
  Graph& g = detail::graph_of("row_softmax", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw ShapeError("row_softmax: empty rows");
  auto av = a.value();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = av.data() + i * n;
    double mx = *std::max_element(x, x + n);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return g.record(Op::kRowSoftmax, m, n, std::move(out), {a.id()});
}

// Non-overlapping window sum along a vector (row or column orientation kept).
inline Var sum_pool(Var a, std::size_t window) {
  Graph& g = detail::graph_of("sum_pool", a);
  if (a.rows() != 1 && a.cols() != 1)
    throw ShapeError("sum_pool: expects a vector, got " + shape_str(a.shape()));
  const std::size_t len = a.rows() * a.cols();
  if (window == 0 || len % window != 0)
    throw PreconditionError("sum_pool: window " + std::to_string(window) +
                            " does not divide length " + std::to_string(len));
  auto av = a.value();
  std::vector<double> out(len / window, 0.0);
  for (std::size_t i = 0; i < len; ++i) out[i / window] += av[i];
  const bool column = a.cols() == 1 && a.rows() != 1;
  return g.record(Op::kSumPool, column ? len / window : 1,
                  column ? 1 : len / window, std::move(out), {a.id()}, {window});
}

inline Var signed_sqrt(Var a) {
  Graph& g = detail::graph_of("signed_sqrt", a);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = av[i];
    out[i] = x > 0 ? std::sqrt(x) : x < 0 ? -std::sqrt(-x) : 0.0;
  }
  return g.record(Op::kSignedSqrt, a.rows(), a.cols(), std::move(out), {a.id()});
}

// Whole-tensor Euclidean normalization; a near-zero input maps to zero.
inline Var l2_normalize(Var a) {
  Graph& g = detail::graph_of("l2_normalize", a);
  auto av = a.value();
  double sq = 0;
  for (double x : av) sq += x * x;
  const double norm = std::sqrt(sq);
  std::vector<double> out(av.size(), 0.0);
  if (norm >= kL2NormFloor)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / norm;
  return g.record(Op::kL2Normalize, a.rows(), a.cols(), std::move(out), {a.id()},
                  {}, {norm});
}

// axis 0 stacks vertically (equal cols), axis 1 horizontally (equal rows).
inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw PreconditionError("concat: no inputs");
  if (axis > 1) throw PreconditionError("concat: axis must be 0 or 1");
  Graph& g = detail::graph_of("concat", parts[0]);
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint32_t> ids;
  ids.reserve(parts.size());
  for (const Var& p : parts) {
    detail::same_graph("concat", parts[0], p);
    if (axis == 0) {
      if (p.cols() != parts[0].cols())
        throw ShapeError("concat", parts[0].shape(), p.shape());
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts[0].rows())
        throw ShapeError("concat", parts[0].shape(), p.shape());
      cols += p.cols();
      rows = p.rows();
    }
    ids.push_back(p.id());
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    auto pv = p.value();
    const std::size_t pr = p.rows(), pc = p.cols();
    for (std::size_t i = 0; i < pr; ++i)
      for (std::size_t j = 0; j < pc; ++j) {
        if (axis == 0) out[(offset + i) * cols + j] = pv[i * pc + j];
        else out[i * cols + offset + j] = pv[i * pc + j];
      }
    offset += axis == 0 ? pr : pc;
  }
  return g.record(Op::kConcat, rows, cols, std::move(out), std::move(ids), {axis});
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// Rows [r0, r1) and columns [c0, c1).
inline Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0,
                 std::size_t c1) {
  Graph& g = detail::graph_of("slice", a);
  if (r0 >= r1 || c0 >= c1 || r1 > a.rows() || c1 > a.cols())
    throw ShapeError("slice: range [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ")x[" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") outside " + shape_str(a.shape()));
  auto av = a.value();
  const std::size_t n = a.cols(), rr = r1 - r0, cc = c1 - c0;
  std::vector<double> out(rr * cc);
  for (std::size_t i = 0; i < rr; ++i)
    for (std::size_t j = 0; j < cc; ++j) out[i * cc + j] = av[(r0 + i) * n + c0 + j];
  return g.record(Op::kSlice, rr, cc, std::move(out), {a.id()}, {r0, c0});
}

inline Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
  return slice(a, r0, r1, 0, a.cols());
}
inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  return slice(a, 0, a.rows(), c0, c1);
}

inline Var transpose(Var a) {
  Graph& g = detail::graph_of("transpose", a);
  const std::size_t m = a.rows(), n = a.cols();
  auto av = a.value();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return g.record(Op::kTranspose, n, m, std::move(out), {a.id()});
}

// Multiplies by an explicit (already scaled) mask.
inline Var dropout(Var a, const Tensor& mask) {
  Graph& g = detail::graph_of("dropout", a);
  if (mask.size() != a.rows() * a.cols())
    throw ShapeError("dropout", a.shape(), mask.shape());
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * mask[i];
  return g.record(Op::kDropout, a.rows(), a.cols(), std::move(out), {a.id()}, {},
                  mask.values());
}

// Gathers rows of table (V x d) and returns them as columns (d x L). The id
// equal to pad_id yields a zero column and receives no gradient.
inline Var embedding(Var table, std::span<const std::size_t> ids,
                     std::size_t pad_id) {
  Graph& g = detail::graph_of("embedding", table);
  if (ids.empty()) throw PreconditionError("embedding: empty sequence");
  const std::size_t vocab = table.rows(), d = table.cols(), len = ids.size();
  auto tv = table.value();
  std::vector<double> out(d * len, 0.0);
  for (std::size_t l = 0; l < len; ++l) {
    if (ids[l] >= vocab)
      throw PreconditionError("embedding: id " + std::to_string(ids[l]) +
                              " out of range for vocabulary of " +
                              std::to_string(vocab));
    if (ids[l] == pad_id) continue;
    for (std::size_t j = 0; j < d; ++j) out[j * len + l] = tv[ids[l] * d + j];
  }
  std::vector<std::size_t> attrs{pad_id};
  attrs.insert(attrs.end(), ids.begin(), ids.end());
  return g.record(Op::kEmbedding, d, len, std::move(out), {table.id()},
                  std::move(attrs));
}

// Row-wise -log softmax(logits)[target]; returns an R x 1 column.
inline Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  Graph& g = detail::graph_of("cross_entropy", logits);
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m)
    throw ShapeError("cross_entropy", logits.shape(), {targets.size()});
  auto lv = logits.value();
  std::vector<double> probs(m * n);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n)
      throw PreconditionError("cross_entropy: target " +
                              std::to_string(targets[i]) + " out of range");
    const double* x = lv.data() + i * n;
    double mx = *std::max_element(x, x + n);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (probs[i * n + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    out[i] = -(x[targets[i]] - mx - std::log(z));
  }
  return g.record(Op::kCrossEntropy, m, 1, std::move(out), {logits.id()},
                  std::vector<std::size_t>(targets.begin(), targets.end()),
                  std::move(probs));
}

inline Var sum(Var a) {
  Graph& g = detail::graph_of("sum", a);
  double s = 0;
  for (double x : a.value()) s += x;
  return g.record(Op::kSum, 1, 1, {s}, {a.id()});
}

// ------------------------------------------------------------------ backward

inline void Graph::backward(Var loss) {
  if (loss.graph() != this || loss.id() >= nodes_.size())
    throw PreconditionError("backward: loss does not belong to this graph");
  if (nodes_[loss.id()].value.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_str({nodes_[loss.id()].rows, nodes_[loss.id()].cols}));
  for (std::size_t i = 0; i <= loss.id(); ++i) {
    Node& n = nodes_[i];
    if (n.needs_grad) n.grad.assign(n.value.size(), 0.0);
  }
  nodes_[loss.id()].grad[0] = 1.0;

  for (std::size_t idx = loss.id() + 1; idx-- > 0;) {
    Node& n = nodes_[idx];
    if (!n.needs_grad) continue;
    const auto& dy = n.grad;
    auto in_needs = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
    auto in = [&](std::size_t k) -> Node& { return nodes_[n.inputs[k]]; };

    switch (n.op) {
      case Op::kLeaf: {
        auto& g = n.param->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
        break;
      }
      case Op::kConstant:
        break;
      case Op::kMatMul: {
        Node& a = in(0);
        Node& b = in(1);
        const std::size_t m = a.rows, k = a.cols, c = b.cols;
        if (a.needs_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0;
              for (std::size_t j = 0; j < c; ++j) s += dy[i * c + j] * b.value[p * c + j];
              a.grad[i * k + p] += s;
            }
        if (b.needs_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = a.value[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < c; ++j) b.grad[p * c + j] += aip * dy[i * c + j];
            }
        break;
      }
      case Op::kAdd: {
        const std::size_t mode = n.attrs[0], m = n.rows, c = n.cols;
        if (in_needs(0)) {
          auto& ga = in(0).grad;
          for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i];
        }
        if (in_needs(1)) {
          auto& gb = in(1).grad;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              std::size_t t = mode == 0 ? i * c + j : mode == 1 ? i : j;
              gb[t] += dy[i * c + j];
            }
        }
        break;
      }
      case Op::kSub: {
        if (in_needs(0)) for (std::size_t i = 0; i < dy.size(); ++i) in(0).grad[i] += dy[i];
        if (in_needs(1)) for (std::size_t i = 0; i < dy.size(); ++i) in(1).grad[i] -= dy[i];
        break;
      }
      case Op::kMul: {
        Node& a = in(0);
        Node& b = in(1);
        if (a.needs_grad) for (std::size_t i = 0; i < dy.size(); ++i) a.grad[i] += dy[i] * b.value[i];
        if (b.needs_grad) for (std::size_t i = 0; i < dy.size(); ++i) b.grad[i] += dy[i] * a.value[i];
        break;
      }
      case Op::kAffine: {
        const double alpha = n.saved[0];
        auto& ga = in(0).grad;
        for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += alpha * dy[i];
        break;
      }
      case Op::kTanh: {
        auto& ga = in(0).grad;
        for (std::size_t i = 0; i < dy.size(); ++i)
          ga[i] += dy[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case Op::kSigmoid: {
        auto& ga = in(0).grad;
        for (std::size_t i = 0; i < dy.size(); ++i)
          ga[i] += dy[i] * n.value[i] * (1.0 - n.value[i]);
        break;
      }
      case Op::kRowSoftmax: {
        auto& ga = in(0).grad;
        const std::size_t m = n.rows, c = n.cols;
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0;
          for (std::size_t j = 0; j < c; ++j) dot += dy[i * c + j] * n.value[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            ga[i * c + j] += n.value[i * c + j] * (dy[i * c + j] - dot);
        }
        break;
      }
      case Op::kSumPool: {
        const std::size_t w = n.attrs[0];
        auto& ga = in(0).grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dy[i / w];
        break;
      }
      case Op::kSignedSqrt: {
        Node& a = in(0);
        for (std::size_t i = 0; i < dy.size(); ++i)
          a.grad[i] += dy[i] * 0.5 / std::sqrt(std::abs(a.value[i]) + kSignedSqrtGradEps);
        break;
      }
      case Op::kL2Normalize: {
        const double norm = n.saved[0];
        if (norm < kL2NormFloor) break;
        double dot = 0;
        for (std::size_t i = 0; i < dy.size(); ++i) dot += dy[i] * n.value[i];
        auto& ga = in(0).grad;
        for (std::size_t i = 0; i < dy.size(); ++i)
          ga[i] += (dy[i] - n.value[i] * dot) / norm;
        break;
      }
      case Op::kConcat: {
        const std::size_t axis = n.attrs[0], c = n.cols;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          Node& p = in(k);
          if (p.needs_grad)
            for (std::size_t i = 0; i < p.rows; ++i)
              for (std::size_t j = 0; j < p.cols; ++j)
                p.grad[i * p.cols + j] +=
                    axis == 0 ? dy[(offset + i) * c + j] : dy[i * c + offset + j];
          offset += axis == 0 ? p.rows : p.cols;
        }
        break;
      }
      case Op::kSlice: {
        const std::size_t r0 = n.attrs[0], c0 = n.attrs[1];
        Node& a = in(0);
        for (std::size_t i = 0; i < n.rows; ++i)
          for (std::size_t j = 0; j < n.cols; ++j)
            a.grad[(r0 + i) * a.cols + c0 + j] += dy[i * n.cols + j];
        break;
      }
      case Op::kTranspose: {
        auto& ga = in(0).grad;
        const std::size_t m = n.rows, c = n.cols;  // output dims
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[j * m + i] += dy[i * c + j];
        break;
      }
      case Op::kDropout: {
        auto& ga = in(0).grad;
        for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * n.saved[i];
        break;
      }
      case Op::kEmbedding: {
        Node& t = in(0);
        const std::size_t pad = n.attrs[0], d = n.rows, len = n.cols;
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t id = n.attrs[l + 1];
          if (id == pad) continue;
          for (std::size_t j = 0; j < d; ++j) t.grad[id * d + j] += dy[j * len + l];
        }
        break;
      }
      case Op::kCrossEntropy: {
        auto& ga = in(0).grad;
        const std::size_t m = n.rows, c = in(0).cols;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            double p = n.saved[i * c + j] - (j == n.attrs[i] ? 1.0 : 0.0);
            ga[i * c + j] += dy[i] * p;
          }
        break;
      }
      case Op::kSum: {
        auto& ga = in(0).grad;
        for (double& x : ga) x += dy[0];
        break;
      }
    }
  }
}

inline void backward(Graph& g, Var loss) { g.backward(loss); }

// ------------------------------------------------------------ gradient check

struct FiniteDifferenceOptions {
  double eps = 1e-5;
  // The caller asserts that the loss builder replays identical dropout masks.
  bool frozen_masks = false;
};

// Builds the loss with `build`, backpropagates, and compares every trainable
// element of `params` against a central difference. Returns
// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double finite_difference_check(const std::function<Var(Graph&)>& build,
                                      std::span<Tensor* const> params,
                                      const FiniteDifferenceOptions& opts = {}) {
  if (!(opts.eps > 0.0))
    throw PreconditionError("finite_difference_check: eps must be > 0");
  if (!opts.frozen_masks)
    throw PreconditionError(
        "finite_difference_check: graph must be deterministic (frozen masks)");

  auto eval = [&]() {
    Graph g;
    return build(g).item();
  };

  for (Tensor* p : params) p->clear_grad();
  double base;
  {
    Graph g;
    Var loss = build(g);
    base = loss.item();
    g.backward(loss);
  }
  if (eval() != base)
    throw PreconditionError("finite_difference_check: loss is not deterministic");

  double worst = 0.0;
  for (Tensor* p : params) {
    if (!p->requires_grad()) continue;
    std::vector<double> analytic(p->size(), 0.0);
    if (p->has_grad()) analytic.assign(p->grad().begin(), p->grad().end());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double orig = (*p)[i];
      (*p)[i] = orig + opts.eps;
      const double up = eval();
      (*p)[i] = orig - opts.eps;
      const double down = eval();
      (*p)[i] = orig;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace redan
