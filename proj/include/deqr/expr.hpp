#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "deqr/tensor.hpp"

namespace deqr {

struct NodeId {
  std::int32_t index = -1;
  friend bool operator==(NodeId, NodeId) = default;
};

// Expression tape for reverse-mode differentiation. Nodes are evaluated
// eagerly on insertion; insertion order is the topological order. Graphs are
// single-threaded; distinct graphs share no state.
class ExprGraph {
 public:
  enum class Op : std::uint8_t {
    kLeaf,
    kConstant,
    kMatVec,      // parents: {matrix, vector}
    kTanh,
    kRelu,
    kAdd,         // elementwise, same shape
    kMul,         // elementwise, same shape
    kScale,       // by a compile-time-constant factor
    kSum,         // reduce to scalar
    kSoftmax,
    kLogSoftmax,
    kLog,
    kPick,        // select one entry of a vector
  };

  // Differentiable leaf.
  NodeId leaf(Tensor value);
  // Non-differentiable input.
  NodeId constant(Tensor value);

  NodeId matvec(NodeId matrix, NodeId vec);
  NodeId tanh(NodeId v);
  NodeId relu(NodeId v);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId v, double factor);
  NodeId sum(NodeId v);
  NodeId softmax(NodeId logits);
  NodeId log_softmax(NodeId logits);
  NodeId log(NodeId v);
  NodeId pick(NodeId v, std::size_t index);

  // matvec + bias add, mirroring the plain affine evaluation.
  NodeId affine(NodeId matrix, NodeId vec, NodeId bias);

  const Tensor& value(NodeId id) const;
  bool is_leaf(NodeId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  struct Node {
    Op op;
    NodeId parent_a;
    NodeId parent_b;
    double factor = 0.0;      // kScale
    std::size_t index = 0;    // kPick
    Tensor value;
  };
  const Node& node(NodeId id) const;

 private:
  NodeId push(Node n);
  NodeId check(NodeId id, const char* where) const;
  std::vector<Node> nodes_;
};

struct GradResult {
  Tensor value;
  // Gradient per differentiable leaf, keyed by node index.
  std::map<std::int32_t, Tensor> grads;

  const Tensor& grad(NodeId id) const;
};

// Exact reverse-mode gradients of a scalar output for every differentiable
// leaf. Deterministic: a fixed reverse sweep over insertion order.
GradResult reverse_grad(const ExprGraph& graph, NodeId output);

// Central differences (f(x + h e_k) - f(x - h e_k)) / (2h) per coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double step);

// Composite builders used throughout: all are expressed with the primitive
// node set above.
NodeId entropy_of_logits(ExprGraph& g, NodeId logits);
NodeId cross_entropy_of_logits(ExprGraph& g, NodeId logits, int label);
// KL(softmax(logits) || exp(reference_log_probs)), reference held constant.
NodeId kl_to_reference(ExprGraph& g, NodeId logits,
                       const Tensor& reference_log_probs);
// KL(softmax(logits_a) || softmax(logits_b)) with both sides differentiable.
NodeId kl_between(ExprGraph& g, NodeId logits_a, NodeId logits_b);

}  // namespace deqr
