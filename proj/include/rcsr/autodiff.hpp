#pragma once

// Reverse-mode differentiation over dense double matrices.
//
// A Graph is built once (shapes are inferred and checked at construction) and
// is then immutable: forward(), evaluate() and gradient() are pure functions of
// (graph, bindings) and may be called concurrently.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rcsr/tensor.hpp"

namespace rcsr::ad {

using NodeId = std::size_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

/// Norm below which L2-normalization and cosine treat a row as degenerate.
inline constexpr double kDegenerateNorm = 1e-8;

enum class Op : std::uint8_t {
  Input,
  MaskInput,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Div,
  Affine,
  Relu,
  Gelu,
  Exp,
  Log,
  SoftmaxRows,
  LogSoftmaxRows,
  MaskedSoftmaxRows,
  L2NormalizeRows,
  CosineRows,
  Sum,
  Mean,
  MeanRows,
  SquaredNorm,
  Entropy,
  StopGradient,
  Transpose,
  SliceCols,
  ConcatCols,
  GatherCols,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::MaskInput: return "mask_input";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Affine: return "affine";
    case Op::Relu: return "relu";
    case Op::Gelu: return "gelu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::LogSoftmaxRows: return "log_softmax_rows";
    case Op::MaskedSoftmaxRows: return "masked_softmax_rows";
    case Op::L2NormalizeRows: return "l2_normalize_rows";
    case Op::CosineRows: return "cosine_rows";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::MeanRows: return "mean_rows";
    case Op::SquaredNorm: return "squared_norm";
    case Op::Entropy: return "entropy";
    case Op::StopGradient: return "stop_gradient";
    case Op::Transpose: return "transpose";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::GatherCols: return "gather_cols";
  }
  return "unknown";
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(NodeId node, const std::string& what)
      : std::invalid_argument("node " + std::to_string(node) + ": " + what), node_(node) {}
  NodeId node() const { return node_; }

 private:
  NodeId node_;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(NodeId node, Op op)
      : std::runtime_error("node " + std::to_string(node) + " (" + op_name(op) +
                           "): non-finite value"),
        node_(node) {}
  NodeId node() const { return node_; }

 private:
  NodeId node_;
};

class BindingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Bindings = std::map<std::string, Tensor>;
using Gradients = std::map<std::string, Tensor>;

namespace testing {
/// Fault injection for the gradient checker's self-test: flips the sign of the
/// GELU derivative. Never set outside tests.
inline std::atomic<bool>& corrupt_gelu_backward() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace testing

struct Node {
  Op op = Op::Constant;
  NodeId lhs = kNoNode;
  NodeId rhs = kNoNode;
  std::size_t rows = 0;
  std::size_t cols = 0;
  double alpha = 1.0;
  double beta = 0.0;
  std::size_t offset = 0;
  std::vector<std::size_t> indices;
  std::string name;
  std::shared_ptr<const Tensor> value;
};

class Graph {
 public:
  NodeId input(std::string name, std::size_t rows, std::size_t cols) {
    return add_input(Op::Input, std::move(name), rows, cols);
  }

  /// A non-differentiable 0/1 input (gradient requests are rejected).
  NodeId mask_input(std::string name, std::size_t rows, std::size_t cols) {
    return add_input(Op::MaskInput, std::move(name), rows, cols);
  }

  NodeId constant(Tensor value) {
    return constant(std::make_shared<const Tensor>(std::move(value)));
  }

  NodeId constant(std::shared_ptr<const Tensor> value) {
    Node n;
    n.op = Op::Constant;
    n.rows = value->rows();
    n.cols = value->cols();
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) {
    check_ids(a, b);
    if (cols(a) != rows(b)) {
      fail("matmul " + shape(a) + " * " + shape(b));
    }
    return push(binary(Op::MatMul, a, b, rows(a), cols(b)));
  }

  NodeId add(NodeId a, NodeId b) { return broadcast_binary(Op::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return broadcast_binary(Op::Sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return broadcast_binary(Op::Mul, a, b); }
  NodeId div(NodeId a, NodeId b) { return broadcast_binary(Op::Div, a, b); }

  /// alpha * x + beta, elementwise.
  NodeId affine(NodeId x, double alpha, double beta) {
    check_ids(x);
    Node n = unary(Op::Affine, x);
    n.alpha = alpha;
    n.beta = beta;
    return push(std::move(n));
  }
  NodeId scale(NodeId x, double alpha) { return affine(x, alpha, 0.0); }

  NodeId relu(NodeId x) { return push_unary(Op::Relu, x); }
  NodeId gelu(NodeId x) { return push_unary(Op::Gelu, x); }
  NodeId exp(NodeId x) { return push_unary(Op::Exp, x); }
  NodeId log(NodeId x) { return push_unary(Op::Log, x); }
  NodeId softmax_rows(NodeId x) { return push_unary(Op::SoftmaxRows, x); }
  NodeId log_softmax_rows(NodeId x) { return push_unary(Op::LogSoftmaxRows, x); }
  NodeId l2_normalize_rows(NodeId x) { return push_unary(Op::L2NormalizeRows, x); }
  NodeId stop_gradient(NodeId x) { return push_unary(Op::StopGradient, x); }

  /// Softmax over each row where mask entries equal to 0 receive probability 0.
  NodeId masked_softmax_rows(NodeId x, NodeId mask) {
    check_ids(x, mask);
    const Op mop = nodes_[mask].op;
    if (mop != Op::MaskInput && mop != Op::Constant) {
      fail("masked_softmax_rows: mask must be a mask input or constant");
    }
    if (rows(x) != rows(mask) || cols(x) != cols(mask)) {
      fail("masked_softmax_rows " + shape(x) + " with mask " + shape(mask));
    }
    return push(binary(Op::MaskedSoftmaxRows, x, mask, rows(x), cols(x)));
  }

  /// Cosine of each row of a with the matching row of b (or b's single row).
  NodeId cosine_rows(NodeId a, NodeId b) {
    check_ids(a, b);
    if (cols(a) != cols(b) || (rows(b) != rows(a) && rows(b) != 1)) {
      fail("cosine_rows " + shape(a) + " vs " + shape(b));
    }
    return push(binary(Op::CosineRows, a, b, rows(a), 1));
  }

  NodeId sum(NodeId x) { return push_reduce(Op::Sum, x); }
  NodeId mean(NodeId x) { return push_reduce(Op::Mean, x); }
  NodeId squared_norm(NodeId x) { return push_reduce(Op::SquaredNorm, x); }
  /// Shannon entropy (natural log) of all entries taken as one distribution.
  NodeId entropy(NodeId x) { return push_reduce(Op::Entropy, x); }

  /// Column-wise mean over rows: (r x c) -> (1 x c).
  NodeId mean_rows(NodeId x) {
    check_ids(x);
    if (rows(x) == 0) fail("mean_rows of empty tensor");
    return push(binary(Op::MeanRows, x, kNoNode, 1, cols(x)));
  }

  NodeId transpose(NodeId x) {
    check_ids(x);
    return push(binary(Op::Transpose, x, kNoNode, cols(x), rows(x)));
  }

  NodeId slice_cols(NodeId x, std::size_t start, std::size_t count) {
    check_ids(x);
    if (start + count > cols(x) || count == 0) {
      fail("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
           shape(x));
    }
    Node n = binary(Op::SliceCols, x, kNoNode, rows(x), count);
    n.offset = start;
    return push(std::move(n));
  }

  NodeId concat_cols(NodeId a, NodeId b) {
    check_ids(a, b);
    if (rows(a) != rows(b)) fail("concat_cols " + shape(a) + " with " + shape(b));
    return push(binary(Op::ConcatCols, a, b, rows(a), cols(a) + cols(b)));
  }

  NodeId gather_cols(NodeId x, std::vector<std::size_t> indices) {
    check_ids(x);
    if (indices.empty()) fail("gather_cols with no indices");
    for (std::size_t i : indices) {
      if (i >= cols(x)) fail("gather_cols index " + std::to_string(i) + " of " + shape(x));
    }
    Node n = binary(Op::GatherCols, x, kNoNode, rows(x), indices.size());
    n.indices = std::move(indices);
    return push(std::move(n));
  }

  void set_output(NodeId id) {
    check_ids(id);
    output_ = id;
  }
  NodeId output() const { return output_; }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t rows(NodeId id) const { return nodes_.at(id).rows; }
  std::size_t cols(NodeId id) const { return nodes_.at(id).cols; }

  /// Names of every declared input (mask inputs included).
  std::vector<std::string> input_names() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
      if (n.op == Op::Input || n.op == Op::MaskInput) out.push_back(n.name);
    return out;
  }

  NodeId find_input(const std::string& name) const {
    auto it = inputs_.find(name);
    return it == inputs_.end() ? kNoNode : it->second;
  }

 private:
  NodeId add_input(Op op, std::string name, std::size_t rows, std::size_t cols) {
    if (inputs_.count(name) != 0) fail("duplicate input '" + name + "'");
    Node n;
    n.op = op;
    n.rows = rows;
    n.cols = cols;
    n.name = name;
    const NodeId id = push(std::move(n));
    inputs_.emplace(std::move(name), id);
    return id;
  }

  Node unary(Op op, NodeId x) const { return binary(op, x, kNoNode, rows(x), cols(x)); }

  static Node binary(Op op, NodeId a, NodeId b, std::size_t r, std::size_t c) {
    Node n;
    n.op = op;
    n.lhs = a;
    n.rhs = b;
    n.rows = r;
    n.cols = c;
    return n;
  }

  NodeId push_unary(Op op, NodeId x) {
    check_ids(x);
    return push(unary(op, x));
  }

  NodeId push_reduce(Op op, NodeId x) {
    check_ids(x);
    if (rows(x) * cols(x) == 0) fail(std::string(op_name(op)) + " of empty tensor");
    return push(binary(op, x, kNoNode, 1, 1));
  }

  NodeId broadcast_binary(Op op, NodeId a, NodeId b) {
    check_ids(a, b);
    const bool ok = (rows(b) == rows(a) || rows(b) == 1) && (cols(b) == cols(a) || cols(b) == 1);
    if (!ok) fail(std::string(op_name(op)) + " " + shape(a) + " with " + shape(b));
    return push(binary(op, a, b, rows(a), cols(a)));
  }

  void check_ids(NodeId a, NodeId b = kNoNode) const {
    if (a >= nodes_.size() || (b != kNoNode && b >= nodes_.size())) {
      fail("reference to a node that does not exist");
    }
  }

  std::string shape(NodeId id) const {
    return std::to_string(rows(id)) + "x" + std::to_string(cols(id));
  }

  [[noreturn]] void fail(const std::string& what) const { throw ShapeError(nodes_.size(), what); }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_;
  NodeId output_ = kNoNode;
};

namespace detail {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluK = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluK * x * x * x)));
}

inline double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
}

inline std::size_t bidx(const Tensor& b, std::size_t r, std::size_t c) {
  return (b.rows() == 1 ? 0 : r) * b.cols() + (b.cols() == 1 ? 0 : c);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.values().data() + k * b.cols();
      double* orow = out.values().data() + i * out.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

/// a^T * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  Tensor out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
    }
  }
  return out;
}

/// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
      out(i, j) = s;
    }
  }
  return out;
}

inline void softmax_row(std::span<const double> in, std::span<double> out,
                        const double* mask = nullptr) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < in.size(); ++j)
    if (!mask || mask[j] != 0.0) mx = std::max(mx, in[j]);
  if (!std::isfinite(mx)) {
    // fully masked row
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  double z = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = (!mask || mask[j] != 0.0) ? std::exp(in[j] - mx) : 0.0;
    z += out[j];
  }
  for (double& v : out) v /= z;
}

inline Tensor forward_node(const Node& n, const std::vector<Tensor>& v) {
  const Tensor* a = n.lhs != kNoNode ? &v[n.lhs] : nullptr;
  const Tensor* b = n.rhs != kNoNode ? &v[n.rhs] : nullptr;
  switch (n.op) {
    case Op::Input:
    case Op::MaskInput:
    case Op::Constant:
      break;  // handled by caller
    case Op::MatMul:
      return matmul(*a, *b);
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      Tensor out(a->rows(), a->cols());
      for (std::size_t r = 0; r < a->rows(); ++r) {
        for (std::size_t c = 0; c < a->cols(); ++c) {
          const double x = (*a)(r, c);
          const double y = (*b)[bidx(*b, r, c)];
          double res = 0.0;
          switch (n.op) {
            case Op::Add: res = x + y; break;
            case Op::Sub: res = x - y; break;
            case Op::Mul: res = x * y; break;
            default: res = x / y; break;
          }
          out(r, c) = res;
        }
      }
      return out;
    }
    case Op::Affine: {
      Tensor out = *a;
      for (double& x : out.values()) x = n.alpha * x + n.beta;
      return out;
    }
    case Op::Relu: {
      Tensor out = *a;
      for (double& x : out.values()) x = x > 0.0 ? x : 0.0;
      return out;
    }
    case Op::Gelu: {
      Tensor out = *a;
      for (double& x : out.values()) x = gelu(x);
      return out;
    }
    case Op::Exp: {
      Tensor out = *a;
      for (double& x : out.values()) x = std::exp(x);
      return out;
    }
    case Op::Log: {
      Tensor out = *a;
      for (double& x : out.values()) x = std::log(x);
      return out;
    }
    case Op::SoftmaxRows: {
      Tensor out(a->rows(), a->cols());
      for (std::size_t r = 0; r < a->rows(); ++r) softmax_row(a->row(r), out.row(r));
      return out;
    }
    case Op::MaskedSoftmaxRows: {
      Tensor out(a->rows(), a->cols());
      for (std::size_t r = 0; r < a->rows(); ++r)
        softmax_row(a->row(r), out.row(r), b->values().data() + r * b->cols());
      return out;
    }
    case Op::LogSoftmaxRows: {
      Tensor out(a->rows(), a->cols());
      for (std::size_t r = 0; r < a->rows(); ++r) {
        auto in = a->row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (double x : in) z += std::exp(x - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < in.size(); ++c) out(r, c) = in[c] - lse;
      }
      return out;
    }
    case Op::L2NormalizeRows: {
      Tensor out(a->rows(), a->cols());
      for (std::size_t r = 0; r < a->rows(); ++r) {
        const double nrm = l2_norm(a->row(r));
        if (nrm < kDegenerateNorm) continue;
        for (std::size_t c = 0; c < a->cols(); ++c) out(r, c) = (*a)(r, c) / nrm;
      }
      return out;
    }
    case Op::CosineRows: {
      Tensor out(a->rows(), 1);
      for (std::size_t r = 0; r < a->rows(); ++r)
        out(r, 0) = cosine(a->row(r), b->row(b->rows() == 1 ? 0 : r));
      return out;
    }
    case Op::Sum:
    case Op::Mean: {
      double s = 0.0;
      for (double x : a->values()) s += x;
      if (n.op == Op::Mean) s /= static_cast<double>(a->size());
      return Tensor(1, 1, s);
    }
    case Op::MeanRows: {
      Tensor out(1, a->cols());
      for (std::size_t r = 0; r < a->rows(); ++r)
        for (std::size_t c = 0; c < a->cols(); ++c) out(0, c) += (*a)(r, c);
      for (double& x : out.values()) x /= static_cast<double>(a->rows());
      return out;
    }
    case Op::SquaredNorm: {
      double s = 0.0;
      for (double x : a->values()) s += x * x;
      return Tensor(1, 1, s);
    }
    case Op::Entropy: {
      double h = 0.0;
      for (double p : a->values())
        if (p > 0.0) h -= p * std::log(p);
      return Tensor(1, 1, h);
    }
    case Op::StopGradient:
      return *a;
    case Op::Transpose: {
      Tensor out(a->cols(), a->rows());
      for (std::size_t r = 0; r < a->rows(); ++r)
        for (std::size_t c = 0; c < a->cols(); ++c) out(c, r) = (*a)(r, c);
      return out;
    }
    case Op::SliceCols: {
      Tensor out(n.rows, n.cols);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) out(r, c) = (*a)(r, n.offset + c);
      return out;
    }
    case Op::ConcatCols: {
      Tensor out(n.rows, n.cols);
      for (std::size_t r = 0; r < n.rows; ++r) {
        for (std::size_t c = 0; c < a->cols(); ++c) out(r, c) = (*a)(r, c);
        for (std::size_t c = 0; c < b->cols(); ++c) out(r, a->cols() + c) = (*b)(r, c);
      }
      return out;
    }
    case Op::GatherCols: {
      Tensor out(n.rows, n.cols);
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) out(r, c) = (*a)(r, n.indices[c]);
      return out;
    }
  }
  return Tensor();
}

inline void accumulate(std::vector<Tensor>& grads, NodeId id, const Tensor& delta) {
  Tensor& g = grads[id];
  if (g.empty() && !delta.empty()) {
    g = delta;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

/// Sum a full-shape gradient down to a broadcast operand's shape.
inline Tensor reduce_to(const Tensor& full, const Tensor& target_shape) {
  if (full.same_shape(target_shape)) return full;
  Tensor out(target_shape.rows(), target_shape.cols());
  for (std::size_t r = 0; r < full.rows(); ++r)
    for (std::size_t c = 0; c < full.cols(); ++c) out[bidx(out, r, c)] += full(r, c);
  return out;
}

inline void backward_node(const Node& n, const Tensor& y, const std::vector<Tensor>& v,
                          const Tensor& dout, const std::vector<bool>& needs,
                          std::vector<Tensor>& grads) {
  if (n.lhs == kNoNode) return;
  const Tensor& a = v[n.lhs];
  const bool need_a = needs[n.lhs];
  const bool need_b = n.rhs != kNoNode && needs[n.rhs];
  switch (n.op) {
    case Op::Input:
    case Op::MaskInput:
    case Op::Constant:
    case Op::StopGradient:
      return;
    case Op::MatMul: {
      const Tensor& b = v[n.rhs];
      if (need_a) accumulate(grads, n.lhs, matmul_nt(dout, b));
      if (need_b) accumulate(grads, n.rhs, matmul_tn(a, dout));
      return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      const Tensor& b = v[n.rhs];
      Tensor da(a.rows(), a.cols());
      Tensor db_full(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
          const double g = dout(r, c);
          const double x = a(r, c);
          const double w = b[bidx(b, r, c)];
          switch (n.op) {
            case Op::Add: da(r, c) = g; db_full(r, c) = g; break;
            case Op::Sub: da(r, c) = g; db_full(r, c) = -g; break;
            case Op::Mul: da(r, c) = g * w; db_full(r, c) = g * x; break;
            default: da(r, c) = g / w; db_full(r, c) = -g * x / (w * w); break;
          }
        }
      }
      if (need_a) accumulate(grads, n.lhs, da);
      if (need_b) accumulate(grads, n.rhs, reduce_to(db_full, b));
      return;
    }
    case Op::Affine: {
      Tensor da = dout;
      for (double& x : da.values()) x *= n.alpha;
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::Relu: {
      Tensor da = dout;
      for (std::size_t i = 0; i < da.size(); ++i)
        if (!(a[i] > 0.0)) da[i] = 0.0;
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::Gelu: {
      Tensor da = dout;
      const double sign = testing::corrupt_gelu_backward().load() ? -1.0 : 1.0;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= sign * gelu_grad(a[i]);
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::Exp: {
      Tensor da = dout;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= y[i];
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::Log: {
      Tensor da = dout;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] /= a[i];
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::SoftmaxRows:
    case Op::MaskedSoftmaxRows: {
      Tensor da(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const double s = dot(dout.row(r), y.row(r));
        for (std::size_t c = 0; c < a.cols(); ++c) da(r, c) = y(r, c) * (dout(r, c) - s);
      }
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::LogSoftmaxRows: {
      Tensor da(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (double g : dout.row(r)) s += g;
        for (std::size_t c = 0; c < a.cols(); ++c) da(r, c) = dout(r, c) - std::exp(y(r, c)) * s;
      }
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::L2NormalizeRows: {
      Tensor da(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const double nrm = l2_norm(a.row(r));
        if (nrm < kDegenerateNorm) continue;
        const double proj = dot(y.row(r), dout.row(r));
        for (std::size_t c = 0; c < a.cols(); ++c)
          da(r, c) = (dout(r, c) - y(r, c) * proj) / nrm;
      }
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::CosineRows: {
      const Tensor& b = v[n.rhs];
      Tensor da(a.rows(), a.cols());
      Tensor db(b.rows(), b.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const std::size_t br = b.rows() == 1 ? 0 : r;
        const double na = l2_norm(a.row(r));
        const double nb = l2_norm(b.row(br));
        if (na < kDegenerateNorm || nb < kDegenerateNorm) continue;
        const double cs = y(r, 0);
        const double g = dout(r, 0);
        for (std::size_t c = 0; c < a.cols(); ++c) {
          const double ahat = a(r, c) / na;
          const double bhat = b(br, c) / nb;
          da(r, c) = g * (bhat - cs * ahat) / na;
          db(br, c) += g * (ahat - cs * bhat) / nb;
        }
      }
      if (need_a) accumulate(grads, n.lhs, da);
      if (need_b) accumulate(grads, n.rhs, db);
      return;
    }
    case Op::Sum:
    case Op::Mean: {
      const double g = n.op == Op::Sum ? dout[0] : dout[0] / static_cast<double>(a.size());
      accumulate(grads, n.lhs, Tensor(a.rows(), a.cols(), g));
      return;
    }
    case Op::MeanRows: {
      Tensor da(a.rows(), a.cols());
      const double inv = 1.0 / static_cast<double>(a.rows());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) da(r, c) = dout(0, c) * inv;
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::SquaredNorm: {
      Tensor da = a;
      for (double& x : da.values()) x *= 2.0 * dout[0];
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::Entropy: {
      // Entries with p <= 0 contribute neither value nor gradient.
      Tensor da(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] > 0.0) da[i] = -(std::log(a[i]) + 1.0) * dout[0];
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::Transpose: {
      Tensor da(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) da(r, c) = dout(c, r);
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::SliceCols: {
      Tensor da(a.rows(), a.cols());
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) da(r, n.offset + c) = dout(r, c);
      accumulate(grads, n.lhs, da);
      return;
    }
    case Op::ConcatCols: {
      const Tensor& b = v[n.rhs];
      if (need_a) {
        Tensor da(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) da(r, c) = dout(r, c);
        accumulate(grads, n.lhs, da);
      }
      if (need_b) {
        Tensor db(b.rows(), b.cols());
        for (std::size_t r = 0; r < b.rows(); ++r)
          for (std::size_t c = 0; c < b.cols(); ++c) db(r, c) = dout(r, a.cols() + c);
        accumulate(grads, n.rhs, db);
      }
      return;
    }
    case Op::GatherCols: {
      Tensor da(a.rows(), a.cols());
      for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) da(r, n.indices[c]) += dout(r, c);
      accumulate(grads, n.lhs, da);
      return;
    }
  }
}

}  // namespace detail

/// Forward values of every node, in node order.
inline std::vector<Tensor> forward(const Graph& g, const Bindings& bindings) {
  std::vector<Tensor> values(g.size());
  for (NodeId id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.op == Op::Input || n.op == Op::MaskInput) {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) throw BindingError("input '" + n.name + "' is not bound");
      if (it->second.rows() != n.rows || it->second.cols() != n.cols) {
        throw ShapeError(id, "input '" + n.name + "' declared " + std::to_string(n.rows) + "x" +
                                 std::to_string(n.cols) + " but bound " +
                                 it->second.shape_string());
      }
      values[id] = it->second;
    } else if (n.op == Op::Constant) {
      values[id] = *n.value;
    } else {
      values[id] = detail::forward_node(n, values);
    }
    if (!values[id].all_finite()) throw NonFiniteError(id, n.op);
  }
  return values;
}

/// Value of an arbitrary node.
inline Tensor evaluate_node(const Graph& g, const Bindings& bindings, NodeId node) {
  auto values = forward(g, bindings);
  return std::move(values.at(node));
}

/// Scalar value of the designated output.
inline double evaluate(const Graph& g, const Bindings& bindings) {
  if (g.output() == kNoNode) throw std::invalid_argument("graph has no designated output");
  if (g.rows(g.output()) != 1 || g.cols(g.output()) != 1) {
    throw ShapeError(g.output(), "designated output is not 1x1");
  }
  return forward(g, bindings)[g.output()][0];
}

struct ValueAndGradient {
  double value = 0.0;
  Gradients gradients;
};

inline ValueAndGradient value_and_gradient(const Graph& g, const Bindings& bindings,
                                           const std::set<std::string>& wrt) {
  const NodeId out = g.output();
  if (out == kNoNode) throw std::invalid_argument("graph has no designated output");
  if (g.rows(out) != 1 || g.cols(out) != 1) throw ShapeError(out, "designated output is not 1x1");

  std::vector<bool> needs(g.size(), false);
  std::map<NodeId, std::string> targets;
  for (const auto& name : wrt) {
    const NodeId id = g.find_input(name);
    if (id == kNoNode) throw BindingError("gradient requested for unknown input '" + name + "'");
    if (g.node(id).op == Op::MaskInput) {
      throw BindingError("gradient requested for mask input '" + name + "'");
    }
    needs[id] = true;
    targets.emplace(id, name);
  }
  for (NodeId id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.op == Op::StopGradient || n.lhs == kNoNode) continue;
    needs[id] = needs[n.lhs] || (n.rhs != kNoNode && needs[n.rhs]);
  }

  const auto values = forward(g, bindings);
  std::vector<Tensor> grads(g.size());
  if (needs[out]) {
    grads[out] = Tensor(1, 1, 1.0);
    for (NodeId id = out + 1; id-- > 0;) {
      if (!needs[id] || grads[id].empty()) continue;
      detail::backward_node(g.node(id), values[id], values, grads[id], needs, grads);
    }
  }

  ValueAndGradient result;
  result.value = values[out][0];
  for (const auto& [id, name] : targets) {
    Tensor gt = grads[id].empty() ? Tensor(g.rows(id), g.cols(id)) : std::move(grads[id]);
    result.gradients.emplace(name, std::move(gt));
  }
  return result;
}

/// d(output)/d(input) for each requested input, same shape as the input.
inline Gradients gradient(const Graph& g, const Bindings& bindings,
                          const std::set<std::string>& wrt) {
  return value_and_gradient(g, bindings, wrt).gradients;
}

/// Max over coordinates of |analytic - numeric| / max(1, |numeric|), with
/// central differences of the given step.
inline double check_gradients(const Graph& g, const Bindings& bindings,
                              const std::set<std::string>& wrt, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("check_gradients: step must be positive");
  const Gradients analytic = gradient(g, bindings, wrt);
  Bindings probe = bindings;
  double worst = 0.0;
  for (const auto& name : wrt) {
    Tensor& x = probe.at(name);
    const Tensor& ga = analytic.at(name);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + step;
      const double fp = evaluate(g, probe);
      x[i] = orig - step;
      const double fm = evaluate(g, probe);
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::abs(ga[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace rcsr::ad
