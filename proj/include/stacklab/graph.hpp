#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "stacklab/tensor.hpp"

namespace stacklab {

enum class OpKind : std::uint8_t {
  parameter,
  constant,
  matmul,
  add,
  mul,
  sigmoid,
  tanh,
  softmax,
  concat,
  slice,
  sum,
  cross_entropy,
  lookup,
  stack_update,
  stack_read,
};

std::string_view op_name(OpKind kind);

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order;
/// backward walks them in exact reverse append order and may run only once.
///
/// Operation semantics (rank-1 tensors are columns):
///   matmul(A[m,k], B[k,n])          -> [m,n]
///   add/mul(A, B)                   -> elementwise, identical shapes
///   sigmoid/tanh(A)                 -> elementwise
///   softmax(A[m,n])                 -> column-wise softmax
///   concat(A_1..A_j)                -> rows stacked, all with equal cols
///   slice(A, begin, end)            -> rows [begin, end)
///   sum(A)                          -> [1,1]
///   cross_entropy(logits[k,1], t)   -> [1,1] = -log softmax(logits)[t]
///   lookup(table[V,E], row)         -> [E,1] (one-hot product, transposed)
///   stack_update(S[D,d], a[3,1], v[d,1]) -> [D+1,d] superposition update
///   stack_read(S[D,d], k)           -> [k*d,1] top k cells, zero past depth
template <typename Scalar>
class BasicGraph {
 public:
  using TensorType = BasicTensor<Scalar>;

  BasicGraph() = default;
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;
  BasicGraph(BasicGraph&&) = default;
  BasicGraph& operator=(BasicGraph&&) = default;

  /// Binds a persistent tensor. Gradients flow into `tensor.grad` on backward
  /// when `tensor.requires_grad` is set; the tensor must outlive the graph.
  NodeId parameter(TensorType& tensor);
  NodeId constant(TensorType value);

  NodeId apply(OpKind kind, std::span<const NodeId> inputs, std::size_t arg0 = 0,
               std::size_t arg1 = 0);

  NodeId matmul(NodeId a, NodeId b) { return apply2(OpKind::matmul, a, b); }
  NodeId add(NodeId a, NodeId b) { return apply2(OpKind::add, a, b); }
  NodeId mul(NodeId a, NodeId b) { return apply2(OpKind::mul, a, b); }
  NodeId sigmoid(NodeId a) { return apply1(OpKind::sigmoid, a); }
  NodeId tanh(NodeId a) { return apply1(OpKind::tanh, a); }
  NodeId softmax(NodeId a) { return apply1(OpKind::softmax, a); }
  NodeId concat(std::span<const NodeId> parts) { return apply(OpKind::concat, parts); }
  NodeId concat(std::initializer_list<NodeId> parts) {
    return apply(OpKind::concat, std::span<const NodeId>(parts.begin(), parts.size()));
  }
  NodeId slice(NodeId a, std::size_t begin, std::size_t end) {
    return apply1(OpKind::slice, a, begin, end);
  }
  NodeId sum(NodeId a) { return apply1(OpKind::sum, a); }
  NodeId cross_entropy(NodeId logits, std::size_t target) {
    return apply1(OpKind::cross_entropy, logits, target);
  }
  NodeId lookup(NodeId table, std::size_t row) { return apply1(OpKind::lookup, table, row); }
  NodeId stack_update(NodeId stack, NodeId actions, NodeId push_value) {
    const NodeId in[3] = {stack, actions, push_value};
    return apply(OpKind::stack_update, in);
  }
  NodeId stack_read(NodeId stack, std::size_t cells) {
    return apply1(OpKind::stack_read, stack, cells);
  }

  const TensorType& value(NodeId id) const {
    const Node& n = nodes_.at(id.index);
    return n.bound ? *n.bound : n.value;
  }
  Scalar scalar(NodeId id) const;
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Propagates d(loss)/d(node) to every bound parameter with requires_grad.
  /// Gradients are accumulated (+=) into the parameter's grad buffer.
  void backward(NodeId loss);

 private:
  struct Node {
    OpKind kind;
    std::vector<std::uint32_t> inputs;
    bool needs_grad = false;
    std::size_t arg0 = 0;
    std::size_t arg1 = 0;
    TensorType value;
    std::vector<Scalar> aux;  // cached softmax for cross_entropy
    TensorType* bound = nullptr;
  };

  NodeId apply1(OpKind kind, NodeId a, std::size_t arg0 = 0, std::size_t arg1 = 0) {
    const NodeId in[1] = {a};
    return apply(kind, in, arg0, arg1);
  }
  NodeId apply2(OpKind kind, NodeId a, NodeId b) {
    const NodeId in[2] = {a, b};
    return apply(kind, in);
  }

  void backward_node(const Node& node, const std::vector<Scalar>& g,
                     std::vector<std::vector<Scalar>>& grads) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

using Graph = BasicGraph<float>;

}  // namespace stacklab
