#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape is a static computation graph: ops are recorded once (shapes are
// checked at record time), then the graph can be re-evaluated any number of
// times with freshly bound inputs. Nodes are stored in topological order by
// construction, so forward() is a single pass and backward() a single reverse
// pass. Rows usually index batch elements; every row-wise op (softmax, L1
// normalization, outer product, ...) acts on each row independently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "markov_mamba/errors.hpp"
#include "markov_mamba/tensor.hpp"

namespace markov_mamba::ad {

using NodeId = std::uint32_t;
using NamedTensors = std::map<std::string, Tensor>;

inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

enum class OpKind : std::uint8_t {
  kInput,
  kConstant,
  kMatMul,    // a[m,k] * b[k,n]
  kMatMulBT,  // a[m,k] * b[n,k]^T
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kExp,
  kLog,
  kSoftplus,
  kSigmoid,
  kRelu,
  kSoftmaxRows,
  kL1NormRows,
  kSliceCols,
  kConcatCols,
  kConcatRows,
  kSum,
  kAddN,
  kOuterRows,   // x[R,m], y[R,n] -> [R, m*n], row r = vec(x_r y_r^T)
  kRowMatVec,   // h[R, m*n], c[R,n] -> [R,m], row r = mat(h_r) c_r
  kGather,      // table[A,k], index[R,1] -> [R,k]
  kPick,        // x[R,k], index[R,1] -> [R,1]
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulBT: return "matmul_bt";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kScale: return "scale";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmaxRows: return "softmax";
    case OpKind::kL1NormRows: return "l1_normalize";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kSum: return "sum";
    case OpKind::kAddN: return "add_n";
    case OpKind::kOuterRows: return "outer";
    case OpKind::kRowMatVec: return "row_matvec";
    case OpKind::kGather: return "gather";
    case OpKind::kPick: return "pick";
  }
  return "?";
}

namespace detail {

inline double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline std::size_t broadcast_dim(std::size_t a, std::size_t b, bool& ok) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  ok = false;
  return 0;
}

}  // namespace detail

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMajorMatrix> mat(Tensor& t) {
  return {t.storage().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
inline Eigen::Map<const RowMajorMatrix> mat(const Tensor& t) {
  return {t.storage().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

class Tape {
 public:
  // ---- recording -------------------------------------------------------

  /// Named input leaf. Non-differentiable inputs (token indices) always
  /// report a zero gradient.
  NodeId input(const std::string& name, Shape shape, bool differentiable = true) {
    if (input_index_.contains(name)) throw StructuralError("duplicate input name '" + name + "'");
    Node n{.op = OpKind::kInput, .shape = shape};
    n.needs_grad = differentiable;
    n.label = name;
    const NodeId id = push(std::move(n));
    input_index_[name] = id;
    inputs_.push_back(id);
    bound_.push_back(false);
    return id;
  }

  NodeId constant(Tensor value, std::string label = {}) {
    Node n{.op = OpKind::kConstant, .shape = value.shape()};
    n.label = std::move(label);
    const NodeId id = push(std::move(n));
    values_[id] = std::move(value);
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa.cols != sb.rows) mismatch("matmul", sa, sb);
    return push_op(OpKind::kMatMul, {sa.rows, sb.cols}, a, b);
  }

  NodeId matmul_bt(NodeId a, NodeId b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa.cols != sb.cols) mismatch("matmul_bt", sa, sb);
    return push_op(OpKind::kMatMulBT, {sa.rows, sb.rows}, a, b);
  }

  NodeId transpose(NodeId a) {
    const Shape s = shape(a);
    return push_op(OpKind::kTranspose, {s.cols, s.rows}, a);
  }

  NodeId add(NodeId a, NodeId b) { return binary(OpKind::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(OpKind::kSub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(OpKind::kMul, a, b); }
  NodeId div(NodeId a, NodeId b) { return binary(OpKind::kDiv, a, b); }

  NodeId scale(NodeId a, double s) {
    const NodeId id = push_op(OpKind::kScale, shape(a), a);
    nodes_[id].scalar = s;
    return id;
  }
  NodeId neg(NodeId a) { return scale(a, -1.0); }

  NodeId exp(NodeId a) { return push_op(OpKind::kExp, shape(a), a); }
  NodeId log(NodeId a) { return push_op(OpKind::kLog, shape(a), a); }
  NodeId softplus(NodeId a) { return push_op(OpKind::kSoftplus, shape(a), a); }
  NodeId sigmoid(NodeId a) { return push_op(OpKind::kSigmoid, shape(a), a); }
  NodeId relu(NodeId a) { return push_op(OpKind::kRelu, shape(a), a); }
  NodeId softmax_rows(NodeId a) { return push_op(OpKind::kSoftmaxRows, shape(a), a); }

  /// Row-wise max(x, floor) / sum(max(x, floor)). With `strict`, a row whose
  /// entries are all at the floor raises a DomainError.
  NodeId l1_normalize_rows(NodeId a, double floor, bool strict) {
    const NodeId id = push_op(OpKind::kL1NormRows, shape(a), a);
    nodes_[id].scalar = floor;
    nodes_[id].strict = strict;
    return id;
  }

  NodeId slice_cols(NodeId a, std::size_t begin, std::size_t end) {
    const Shape s = shape(a);
    if (begin >= end || end > s.cols) {
      throw StructuralError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") out of range for " + s.str());
    }
    const NodeId id = push_op(OpKind::kSliceCols, {s.rows, end - begin}, a);
    nodes_[id].aux = begin;
    return id;
  }

  NodeId concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw StructuralError("concat_cols of nothing");
    const std::size_t rows = shape(parts.front()).rows;
    std::size_t cols = 0;
    for (NodeId p : parts) {
      if (shape(p).rows != rows) mismatch("concat_cols", shape(parts.front()), shape(p));
      cols += shape(p).cols;
    }
    return push_many(OpKind::kConcatCols, {rows, cols}, parts);
  }

  /// Stacks row blocks vertically: parts[0] rows first.
  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw StructuralError("concat_rows of nothing");
    const std::size_t cols = shape(parts.front()).cols;
    std::size_t rows = 0;
    for (NodeId p : parts) {
      if (shape(p).cols != cols) mismatch("concat_rows", shape(parts.front()), shape(p));
      rows += shape(p).rows;
    }
    return push_many(OpKind::kConcatRows, {rows, cols}, parts);
  }

  NodeId sum(NodeId a) { return push_op(OpKind::kSum, {1, 1}, a); }

  NodeId add_n(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw StructuralError("add_n of nothing");
    const Shape s = shape(parts.front());
    for (NodeId p : parts) {
      if (shape(p) != s) mismatch("add_n", s, shape(p));
    }
    return push_many(OpKind::kAddN, s, parts);
  }

  NodeId outer_rows(NodeId x, NodeId y) {
    const Shape sx = shape(x), sy = shape(y);
    if (sx.rows != sy.rows) mismatch("outer", sx, sy);
    return push_op(OpKind::kOuterRows, {sx.rows, sx.cols * sy.cols}, x, y);
  }

  NodeId row_matvec(NodeId h, NodeId c) {
    const Shape sh = shape(h), sc = shape(c);
    if (sh.rows != sc.rows || sc.cols == 0 || sh.cols % sc.cols != 0) mismatch("row_matvec", sh, sc);
    return push_op(OpKind::kRowMatVec, {sh.rows, sh.cols / sc.cols}, h, c);
  }

  NodeId gather_rows(NodeId table, NodeId index) {
    const Shape si = shape(index);
    if (si.cols != 1) mismatch("gather", shape(table), si);
    return push_op(OpKind::kGather, {si.rows, shape(table).cols}, table, index);
  }

  NodeId pick(NodeId x, NodeId index) {
    const Shape sx = shape(x), si = shape(index);
    if (si.cols != 1 || si.rows != sx.rows) mismatch("pick", sx, si);
    return push_op(OpKind::kPick, {sx.rows, 1}, x, index);
  }

  void set_label(NodeId id, std::string label) { nodes_.at(id).label = std::move(label); }
  void mark_output(const std::string& name, NodeId id) { outputs_[name] = id; }

  // ---- binding & evaluation -------------------------------------------

  NodeId find_input(const std::string& name) const {
    auto it = input_index_.find(name);
    if (it == input_index_.end()) throw ContractError("no input named '" + name + "'");
    return it->second;
  }

  void bind(NodeId id, const Tensor& value) {
    check_input(id, value.shape());
    values_[id] = value;
    mark_bound(id);
  }
  void bind(NodeId id, Tensor&& value) {
    check_input(id, value.shape());
    values_[id] = std::move(value);
    mark_bound(id);
  }
  void bind(const std::string& name, const Tensor& value) { bind(find_input(name), value); }

  /// In-place access to an input buffer (shape fixed); marks it bound.
  Tensor& input_buffer(NodeId id) {
    check_input(id, nodes_[id].shape, /*check_shape=*/false);
    if (values_[id].shape() != nodes_[id].shape) values_[id].reshape_zero(nodes_[id].shape);
    mark_bound(id);
    return values_[id];
  }

  void forward() {
    for (std::size_t i = 0; i < inputs_.size(); ++i) {
      if (!bound_[i]) throw ContractError("input '" + nodes_[inputs_[i]].label + "' is not bound");
    }
    for (NodeId id = 0; id < nodes_.size(); ++id) eval_node(id);
    evaluated_ = true;
  }

  void backward(NodeId seed) {
    if (!evaluated_) throw ContractError("backward() before forward()");
    if (shape(seed) != Shape{1, 1}) {
      throw ContractError("gradient seed '" + label(seed) + "' is not scalar: " + shape(seed).str());
    }
    touched_.assign(nodes_.size(), false);
    for (NodeId id = 0; id <= seed; ++id) {
      if (nodes_[id].needs_grad) grads_[id].reshape_zero(nodes_[id].shape);
    }
    for (NodeId id = seed + 1; id < nodes_.size(); ++id) grads_[id] = Tensor();
    grads_[seed][0] = 1.0;
    touched_[seed] = true;
    for (NodeId id = seed + 1; id-- > 0;) {
      if (touched_[id] && nodes_[id].needs_grad) backprop_node(id);
    }
  }

  const Tensor& value(NodeId id) const { return values_.at(id); }
  const Tensor& value(const std::string& output) const { return values_.at(output_id(output)); }

  /// Gradient buffer of a node after backward(); zero if not reached.
  Tensor grad(NodeId id) const {
    const Tensor& g = grads_.at(id);
    if (g.shape() == nodes_[id].shape && nodes_[id].needs_grad) return g;
    return Tensor(nodes_[id].shape.rows, nodes_[id].shape.cols);
  }
  const Tensor& grad_ref(NodeId id) const { return grads_.at(id); }

  NodeId output_id(const std::string& name) const {
    auto it = outputs_.find(name);
    if (it == outputs_.end()) throw ContractError("no output named '" + name + "'");
    return it->second;
  }
  const std::map<std::string, NodeId>& outputs() const { return outputs_; }
  const std::vector<NodeId>& inputs() const { return inputs_; }

  Shape shape(NodeId id) const { return nodes_.at(id).shape; }
  OpKind op(NodeId id) const { return nodes_.at(id).op; }
  std::vector<NodeId> parents(NodeId id) const {
    const Node& n = nodes_.at(id);
    if (!n.many.empty()) return n.many;
    std::vector<NodeId> p;
    if (n.a != kNoNode) p.push_back(n.a);
    if (n.b != kNoNode) p.push_back(n.b);
    return p;
  }
  std::string label(NodeId id) const {
    const Node& n = nodes_.at(id);
    if (!n.label.empty()) return n.label;
    return std::string(op_name(n.op)) + "#" + std::to_string(id);
  }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    OpKind op;
    Shape shape;
    NodeId a = kNoNode;
    NodeId b = kNoNode;
    std::vector<NodeId> many = {};
    double scalar = 0.0;
    std::size_t aux = 0;
    bool strict = false;
    bool needs_grad = false;
    std::string label = {};
  };

  NodeId push(Node n) {
    if (nodes_.size() >= kNoNode) throw StructuralError("tape too large");
    nodes_.push_back(std::move(n));
    values_.emplace_back();
    grads_.emplace_back();
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId push_op(OpKind op, Shape s, NodeId a, NodeId b = kNoNode) {
    check_id(a);
    if (b != kNoNode) check_id(b);
    Node n{.op = op, .shape = s, .a = a, .b = b};
    n.needs_grad = nodes_[a].needs_grad || (b != kNoNode && index_free(op) && nodes_[b].needs_grad);
    return push(std::move(n));
  }

  NodeId push_many(OpKind op, Shape s, const std::vector<NodeId>& parts) {
    Node n{.op = op, .shape = s};
    for (NodeId p : parts) {
      check_id(p);
      n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    }
    n.many = parts;
    return push(std::move(n));
  }

  static bool index_free(OpKind op) { return op != OpKind::kGather && op != OpKind::kPick; }

  NodeId binary(OpKind op, NodeId a, NodeId b) {
    const Shape sa = shape(a), sb = shape(b);
    bool ok = true;
    const Shape out{detail::broadcast_dim(sa.rows, sb.rows, ok), detail::broadcast_dim(sa.cols, sb.cols, ok)};
    if (!ok) mismatch(op_name(op), sa, sb);
    return push_op(op, out, a, b);
  }

  void check_id(NodeId id) const {
    if (id >= nodes_.size()) throw StructuralError("unknown node id " + std::to_string(id));
  }

  [[noreturn]] static void mismatch(const char* what, Shape a, Shape b) {
    throw StructuralError(std::string(what) + ": incompatible shapes " + a.str() + " and " + b.str());
  }

  void check_input(NodeId id, Shape s, bool check_shape = true) const {
    check_id(id);
    if (nodes_[id].op != OpKind::kInput) throw ContractError("node " + label(id) + " is not an input");
    if (check_shape && s != nodes_[id].shape) {
      throw StructuralError("input '" + nodes_[id].label + "' expects " + nodes_[id].shape.str() +
                            ", got " + s.str());
    }
  }

  void mark_bound(NodeId id) {
    const auto it = std::find(inputs_.begin(), inputs_.end(), id);
    bound_[static_cast<std::size_t>(it - inputs_.begin())] = true;
  }

  [[noreturn]] void domain(NodeId id, const std::string& what) const {
    throw DomainError(what + " at node '" + label(id) + "'");
  }

  std::size_t index_at(NodeId id, const Tensor& idx, std::size_t r, std::size_t limit) const {
    const double v = idx[r];
    if (!(v >= 0.0) || v != std::floor(v) || static_cast<std::size_t>(v) >= limit) {
      domain(id, "index " + std::to_string(v) + " out of range [0," + std::to_string(limit) + ")");
    }
    return static_cast<std::size_t>(v);
  }

  // ---- forward kernels --------------------------------------------------

  template <class F>
  void broadcast_forward(const Tensor& a, const Tensor& b, Tensor& out, F f) {
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
      return;
    }
    const std::size_t rows = out.rows(), cols = out.cols();
    if (a.shape() == out.shape() && b.rows() == rows && b.cols() == 1) {
      // per-row scalar, e.g. H * a_t
      for (std::size_t r = 0; r < rows; ++r) {
        const double bv = b[r];
        const double* ar = &a(r, 0);
        double* o = &out(r, 0);
        for (std::size_t c = 0; c < cols; ++c) o[c] = f(ar[c], bv);
      }
      return;
    }
    const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        out(r, c) = f(a(ar ? 0 : r, ac ? 0 : c), b(br ? 0 : r, bc ? 0 : c));
      }
    }
  }

  void eval_node(NodeId id) {
    Node& n = nodes_[id];
    if (n.op == OpKind::kInput || n.op == OpKind::kConstant) return;
    Tensor& out = values_[id];
    if (out.shape() != n.shape) out.reshape_zero(n.shape);
    const Tensor* A = n.a != kNoNode ? &values_[n.a] : nullptr;
    const Tensor* B = n.b != kNoNode ? &values_[n.b] : nullptr;

    switch (n.op) {
      case OpKind::kMatMul:
        mat(out).noalias() = mat(*A) * mat(*B);
        break;
      case OpKind::kMatMulBT:
        mat(out).noalias() = mat(*A) * mat(*B).transpose();
        break;
      case OpKind::kTranspose:
        for (std::size_t r = 0; r < A->rows(); ++r)
          for (std::size_t c = 0; c < A->cols(); ++c) out(c, r) = (*A)(r, c);
        break;
      case OpKind::kAdd: broadcast_forward(*A, *B, out, [](double x, double y) { return x + y; }); break;
      case OpKind::kSub: broadcast_forward(*A, *B, out, [](double x, double y) { return x - y; }); break;
      case OpKind::kMul: broadcast_forward(*A, *B, out, [](double x, double y) { return x * y; }); break;
      case OpKind::kDiv: {
        for (double v : B->values()) {
          if (v == 0.0) domain(id, "division by zero");
        }
        broadcast_forward(*A, *B, out, [](double x, double y) { return x / y; });
        break;
      }
      case OpKind::kScale:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.scalar * (*A)[i];
        break;
      case OpKind::kExp:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp((*A)[i]);
        break;
      case OpKind::kLog:
        for (std::size_t i = 0; i < out.size(); ++i) {
          if (!((*A)[i] > 0.0)) domain(id, "log of non-positive value " + std::to_string((*A)[i]));
          out[i] = std::log((*A)[i]);
        }
        break;
      case OpKind::kSoftplus:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_softplus((*A)[i]);
        break;
      case OpKind::kSigmoid:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid((*A)[i]);
        break;
      case OpKind::kRelu:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*A)[i] > 0.0 ? (*A)[i] : 0.0;
        break;
      case OpKind::kSoftmaxRows:
        for (std::size_t r = 0; r < out.rows(); ++r) {
          auto x = A->row_view(r);
          auto y = out.row_view(r);
          const double mx = *std::max_element(x.begin(), x.end());
          double s = 0.0;
          for (std::size_t c = 0; c < x.size(); ++c) s += (y[c] = std::exp(x[c] - mx));
          for (double& v : y) v /= s;
        }
        break;
      case OpKind::kL1NormRows:
        for (std::size_t r = 0; r < out.rows(); ++r) {
          auto x = A->row_view(r);
          auto y = out.row_view(r);
          double s = 0.0;
          bool all_floor = true;
          for (std::size_t c = 0; c < x.size(); ++c) {
            const bool clamped = !(x[c] > n.scalar);
            all_floor = all_floor && clamped;
            s += (y[c] = clamped ? n.scalar : x[c]);
          }
          if (all_floor && n.strict) domain(id, "degenerate logits (all at floor) in row " + std::to_string(r));
          for (double& v : y) v /= s;
        }
        break;
      case OpKind::kSliceCols:
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = (*A)(r, c + n.aux);
        break;
      case OpKind::kConcatCols: {
        std::size_t offset = 0;
        for (NodeId p : n.many) {
          const Tensor& v = values_[p];
          for (std::size_t r = 0; r < v.rows(); ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) out(r, offset + c) = v(r, c);
          offset += v.cols();
        }
        break;
      }
      case OpKind::kConcatRows: {
        double* dst = out.storage().data();
        for (NodeId p : n.many) dst = std::copy(values_[p].storage().begin(), values_[p].storage().end(), dst);
        break;
      }
      case OpKind::kSum: {
        double s = 0.0;
        for (double v : A->values()) s += v;
        out[0] = s;
        break;
      }
      case OpKind::kAddN: {
        out = values_[n.many.front()];
        for (std::size_t k = 1; k < n.many.size(); ++k) {
          const Tensor& v = values_[n.many[k]];
          for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
        }
        break;
      }
      case OpKind::kOuterRows: {
        const std::size_t m = A->cols(), p = B->cols();
        for (std::size_t r = 0; r < out.rows(); ++r) {
          const double* x = &(*A)(r, 0);
          const double* y = &(*B)(r, 0);
          double* o = &out(r, 0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j) o[i * p + j] = x[i] * y[j];
        }
        break;
      }
      case OpKind::kRowMatVec: {
        const std::size_t m = out.cols(), p = B->cols();
        for (std::size_t r = 0; r < out.rows(); ++r) {
          const double* h = &(*A)(r, 0);
          const double* c = &(*B)(r, 0);
          for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < p; ++j) s += h[i * p + j] * c[j];
            out(r, i) = s;
          }
        }
        break;
      }
      case OpKind::kGather:
        for (std::size_t r = 0; r < out.rows(); ++r) {
          const std::size_t k = index_at(id, *B, r, A->rows());
          std::copy_n(&(*A)(k, 0), out.cols(), &out(r, 0));
        }
        break;
      case OpKind::kPick:
        for (std::size_t r = 0; r < out.rows(); ++r) out[r] = (*A)(r, index_at(id, *B, r, A->cols()));
        break;
      case OpKind::kInput:
      case OpKind::kConstant:
        break;
    }
  }

  // ---- backward kernels -------------------------------------------------

  Tensor* grad_target(NodeId p) {
    if (p == kNoNode || !nodes_[p].needs_grad) return nullptr;
    touched_[p] = true;
    return &grads_[p];
  }

  template <class FA, class FB>
  void broadcast_backward(NodeId id, FA fa, FB fb) {
    const Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    const Tensor& a = values_[n.a];
    const Tensor& b = values_[n.b];
    Tensor* ga = grad_target(n.a);
    Tensor* gb = grad_target(n.b);
    const std::size_t rows = n.shape.rows, cols = n.shape.cols;
    if (a.shape() == n.shape && (b.shape() == n.shape || (b.rows() == rows && b.cols() == 1))) {
      const bool full = b.shape() == n.shape;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = &g(r, 0);
        const double* arow = &a(r, 0);
        double* garow = ga ? &(*ga)(r, 0) : nullptr;
        if (full) {
          const double* brow = &b(r, 0);
          double* gbrow = gb ? &(*gb)(r, 0) : nullptr;
          for (std::size_t c = 0; c < cols; ++c) {
            if (garow) garow[c] += fa(gr[c], arow[c], brow[c]);
            if (gbrow) gbrow[c] += fb(gr[c], arow[c], brow[c]);
          }
        } else {
          const double bv = b[r];
          double acc = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            if (garow) garow[c] += fa(gr[c], arow[c], bv);
            acc += fb(gr[c], arow[c], bv);
          }
          if (gb) (*gb)[r] += acc;
        }
      }
      return;
    }
    const bool ar = a.rows() == 1 && rows != 1, ac = a.cols() == 1 && cols != 1;
    const bool br = b.rows() == 1 && rows != 1, bc = b.cols() == 1 && cols != 1;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t rA = ar ? 0 : r, cA = ac ? 0 : c, rB = br ? 0 : r, cB = bc ? 0 : c;
        const double gv = g(r, c), av = a(rA, cA), bv = b(rB, cB);
        if (ga) (*ga)(rA, cA) += fa(gv, av, bv);
        if (gb) (*gb)(rB, cB) += fb(gv, av, bv);
      }
    }
  }

  void backprop_node(NodeId id) {
    const Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    const Tensor& y = values_[id];
    const Tensor* A = n.a != kNoNode ? &values_[n.a] : nullptr;
    const Tensor* B = n.b != kNoNode ? &values_[n.b] : nullptr;

    switch (n.op) {
      case OpKind::kInput:
      case OpKind::kConstant:
        break;
      case OpKind::kMatMul:
        if (Tensor* ga = grad_target(n.a)) mat(*ga).noalias() += mat(g) * mat(*B).transpose();
        if (Tensor* gb = grad_target(n.b)) mat(*gb).noalias() += mat(*A).transpose() * mat(g);
        break;
      case OpKind::kMatMulBT:
        if (Tensor* ga = grad_target(n.a)) mat(*ga).noalias() += mat(g) * mat(*B);
        if (Tensor* gb = grad_target(n.b)) mat(*gb).noalias() += mat(g).transpose() * mat(*A);
        break;
      case OpKind::kTranspose:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t r = 0; r < A->rows(); ++r)
            for (std::size_t c = 0; c < A->cols(); ++c) (*ga)(r, c) += g(c, r);
        }
        break;
      case OpKind::kAdd:
        broadcast_backward(id, [](double gv, double, double) { return gv; },
                           [](double gv, double, double) { return gv; });
        break;
      case OpKind::kSub:
        broadcast_backward(id, [](double gv, double, double) { return gv; },
                           [](double gv, double, double) { return -gv; });
        break;
      case OpKind::kMul:
        broadcast_backward(id, [](double gv, double, double b) { return gv * b; },
                           [](double gv, double a, double) { return gv * a; });
        break;
      case OpKind::kDiv:
        broadcast_backward(id, [](double gv, double, double b) { return gv / b; },
                           [](double gv, double a, double b) { return -gv * a / (b * b); });
        break;
      case OpKind::kScale:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += n.scalar * g[i];
        }
        break;
      case OpKind::kExp:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
        }
        break;
      case OpKind::kLog:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / (*A)[i];
        }
        break;
      case OpKind::kSoftplus:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * detail::stable_sigmoid((*A)[i]);
        }
        break;
      case OpKind::kSigmoid:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
        }
        break;
      case OpKind::kRelu:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if ((*A)[i] > 0.0) (*ga)[i] += g[i];
          }
        }
        break;
      case OpKind::kSoftmaxRows:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t r = 0; r < y.rows(); ++r) {
            auto yr = y.row_view(r);
            auto gr = g.row_view(r);
            double dot = 0.0;
            for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
            auto gar = ga->row_view(r);
            for (std::size_t c = 0; c < yr.size(); ++c) gar[c] += yr[c] * (gr[c] - dot);
          }
        }
        break;
      case OpKind::kL1NormRows:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t r = 0; r < y.rows(); ++r) {
            auto x = A->row_view(r);
            auto yr = y.row_view(r);
            auto gr = g.row_view(r);
            double s = 0.0, dot = 0.0;
            for (std::size_t c = 0; c < x.size(); ++c) {
              s += x[c] > n.scalar ? x[c] : n.scalar;
              dot += gr[c] * yr[c];
            }
            auto gar = ga->row_view(r);
            for (std::size_t c = 0; c < x.size(); ++c) {
              if (x[c] > n.scalar) gar[c] += (gr[c] - dot) / s;
            }
          }
        }
        break;
      case OpKind::kSliceCols:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(r, c + n.aux) += g(r, c);
        }
        break;
      case OpKind::kConcatCols: {
        std::size_t offset = 0;
        for (NodeId p : n.many) {
          const Shape sp = nodes_[p].shape;
          if (Tensor* gp = grad_target(p)) {
            for (std::size_t r = 0; r < sp.rows; ++r)
              for (std::size_t c = 0; c < sp.cols; ++c) (*gp)(r, c) += g(r, offset + c);
          }
          offset += sp.cols;
        }
        break;
      }
      case OpKind::kConcatRows: {
        const double* src = g.storage().data();
        for (NodeId p : n.many) {
          const std::size_t len = nodes_[p].shape.size();
          if (Tensor* gp = grad_target(p)) {
            double* dst = gp->storage().data();
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
          src += len;
        }
        break;
      }
      case OpKind::kSum:
        if (Tensor* ga = grad_target(n.a)) {
          const double gv = g[0];
          for (double& v : ga->values()) v += gv;
        }
        break;
      case OpKind::kAddN:
        for (NodeId p : n.many) {
          if (Tensor* gp = grad_target(p)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
          }
        }
        break;
      case OpKind::kOuterRows: {
        const std::size_t m = A->cols(), p = B->cols();
        Tensor* ga = grad_target(n.a);
        Tensor* gb = grad_target(n.b);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const double* gr = &g(r, 0);
          const double* x = &(*A)(r, 0);
          const double* yv = &(*B)(r, 0);
          for (std::size_t i = 0; i < m; ++i) {
            const double* gi = gr + i * p;
            if (ga) {
              double s = 0.0;
              for (std::size_t j = 0; j < p; ++j) s += gi[j] * yv[j];
              (*ga)(r, i) += s;
            }
            if (gb) {
              double* gbr = &(*gb)(r, 0);
              for (std::size_t j = 0; j < p; ++j) gbr[j] += gi[j] * x[i];
            }
          }
        }
        break;
      }
      case OpKind::kRowMatVec: {
        const std::size_t m = g.cols(), p = B->cols();
        Tensor* ga = grad_target(n.a);
        Tensor* gb = grad_target(n.b);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const double* h = &(*A)(r, 0);
          const double* c = &(*B)(r, 0);
          for (std::size_t i = 0; i < m; ++i) {
            const double gv = g(r, i);
            if (ga) {
              double* ghi = &(*ga)(r, i * p);
              for (std::size_t j = 0; j < p; ++j) ghi[j] += gv * c[j];
            }
            if (gb) {
              double* gc = &(*gb)(r, 0);
              for (std::size_t j = 0; j < p; ++j) gc[j] += gv * h[i * p + j];
            }
          }
        }
        break;
      }
      case OpKind::kGather:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            const std::size_t k = static_cast<std::size_t>((*B)[r]);
            double* dst = &(*ga)(k, 0);
            const double* src = &g(r, 0);
            for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += src[c];
          }
        }
        break;
      case OpKind::kPick:
        if (Tensor* ga = grad_target(n.a)) {
          for (std::size_t r = 0; r < g.rows(); ++r) (*ga)(r, static_cast<std::size_t>((*B)[r])) += g[r];
        }
        break;
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::vector<bool> touched_;
  std::vector<NodeId> inputs_;
  std::vector<bool> bound_;
  std::map<std::string, NodeId> input_index_;
  std::map<std::string, NodeId> outputs_;
  bool evaluated_ = false;
};

/// Binds `inputs`, runs the forward pass and returns every marked output.
inline NamedTensors evaluate(Tape& tape, const NamedTensors& inputs) {
  for (const auto& [name, t] : inputs) tape.bind(name, t);
  tape.forward();
  NamedTensors out;
  for (const auto& [name, id] : tape.outputs()) out.emplace(name, tape.value(id));
  return out;
}

/// Partial derivatives of the scalar `seed` with respect to every input.
inline NamedTensors gradient(Tape& tape, const NamedTensors& inputs, NodeId seed) {
  for (const auto& [name, t] : inputs) tape.bind(name, t);
  tape.forward();
  tape.backward(seed);
  NamedTensors out;
  for (NodeId id : tape.inputs()) out.emplace(tape.label(id), tape.grad(id));
  return out;
}

}  // namespace markov_mamba::ad
