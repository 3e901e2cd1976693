#include "deqr/expr.hpp"

#include <cmath>
#include <string>

#include "deqr/errors.hpp"

namespace deqr {

NodeId ExprGraph::push(Node n) {
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::int32_t>(nodes_.size() - 1)};
}

NodeId ExprGraph::check(NodeId id, const char* where) const {
  if (id.index < 0 || static_cast<std::size_t>(id.index) >= nodes_.size()) {
    throw ContractError(std::string(where) + ": node id out of range");
  }
  return id;
}

const ExprGraph::Node& ExprGraph::node(NodeId id) const {
  check(id, "ExprGraph::node");
  return nodes_[static_cast<std::size_t>(id.index)];
}

const Tensor& ExprGraph::value(NodeId id) const { return node(id).value; }

bool ExprGraph::is_leaf(NodeId id) const { return node(id).op == Op::kLeaf; }

NodeId ExprGraph::leaf(Tensor value) {
  return push({Op::kLeaf, {}, {}, 0.0, 0, std::move(value)});
}

NodeId ExprGraph::constant(Tensor value) {
  return push({Op::kConstant, {}, {}, 0.0, 0, std::move(value)});
}

NodeId ExprGraph::matvec(NodeId matrix, NodeId vec) {
  check(matrix, "matvec");
  check(vec, "matvec");
  Tensor out = deqr::matvec(value(matrix), value(vec));
  return push({Op::kMatVec, matrix, vec, 0.0, 0, std::move(out)});
}

NodeId ExprGraph::tanh(NodeId v) {
  check(v, "tanh");
  Tensor out = value(v);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  return push({Op::kTanh, v, {}, 0.0, 0, std::move(out)});
}

NodeId ExprGraph::relu(NodeId v) {
  check(v, "relu");
  Tensor out = value(v);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = out[i] > 0.0 ? out[i] : 0.0;
  }
  return push({Op::kRelu, v, {}, 0.0, 0, std::move(out)});
}

NodeId ExprGraph::add(NodeId a, NodeId b) {
  check(a, "add");
  check(b, "add");
  Tensor out = deqr::add(value(a), value(b));
  return push({Op::kAdd, a, b, 0.0, 0, std::move(out)});
}

NodeId ExprGraph::mul(NodeId a, NodeId b) {
  check(a, "mul");
  check(b, "mul");
  if (!value(a).same_shape(value(b))) {
    throw DimensionError("ExprGraph::mul: operand shapes differ");
  }
  Tensor out = value(a);
  const Tensor& vb = value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] * vb[i];
  return push({Op::kMul, a, b, 0.0, 0, std::move(out)});
}

NodeId ExprGraph::scale(NodeId v, double factor) {
  check(v, "scale");
  Tensor out = deqr::scale(value(v), factor);
  return push({Op::kScale, v, {}, factor, 0, std::move(out)});
}

NodeId ExprGraph::sum(NodeId v) {
  check(v, "sum");
  double acc = 0.0;
  for (double x : value(v).data()) acc += x;
  return push({Op::kSum, v, {}, 0.0, 0, Tensor::scalar(acc)});
}

NodeId ExprGraph::softmax(NodeId logits) {
  check(logits, "softmax");
  Tensor out = deqr::softmax(value(logits));
  return push({Op::kSoftmax, logits, {}, 0.0, 0, std::move(out)});
}

NodeId ExprGraph::log_softmax(NodeId logits) {
  check(logits, "log_softmax");
  Tensor out = deqr::log_softmax(value(logits));
  return push({Op::kLogSoftmax, logits, {}, 0.0, 0, std::move(out)});
}

NodeId ExprGraph::log(NodeId v) {
  check(v, "log");
  Tensor out = value(v);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (out[i] <= 0.0) throw NumericError("ExprGraph::log: non-positive input");
    out[i] = std::log(out[i]);
  }
  return push({Op::kLog, v, {}, 0.0, 0, std::move(out)});
}

NodeId ExprGraph::pick(NodeId v, std::size_t index) {
  check(v, "pick");
  const Tensor& t = value(v);
  if (index >= t.numel()) {
    throw IndexError("ExprGraph::pick: index " + std::to_string(index) +
                     " out of range for " + std::to_string(t.numel()));
  }
  return push({Op::kPick, v, {}, 0.0, index, Tensor::scalar(t[index])});
}

NodeId ExprGraph::affine(NodeId matrix, NodeId vec, NodeId bias) {
  return add(matvec(matrix, vec), bias);
}

const Tensor& GradResult::grad(NodeId id) const {
  auto it = grads.find(id.index);
  if (it == grads.end()) {
    throw ContractError("GradResult::grad: node is not a differentiable leaf");
  }
  return it->second;
}

GradResult reverse_grad(const ExprGraph& graph, NodeId output) {
  const Tensor& out_value = graph.value(output);
  if (out_value.numel() != 1) {
    throw ContractError("reverse_grad: output node is not a scalar");
  }

  const std::size_t n = graph.size();
  std::vector<Tensor> adjoint(n);
  std::vector<bool> touched(n, false);
  auto bump = [&](NodeId id, std::size_t) -> Tensor& {
    auto i = static_cast<std::size_t>(id.index);
    if (!touched[i]) {
      adjoint[i] = Tensor::zeros(graph.value(id).shape());
      touched[i] = true;
    }
    return adjoint[i];
  };

  bump(output, 1)[0] = 1.0;

  using Op = ExprGraph::Op;
  for (std::size_t rev = static_cast<std::size_t>(output.index) + 1; rev > 0;
       --rev) {
    const std::size_t i = rev - 1;
    if (!touched[i]) continue;
    const auto& node = graph.node(NodeId{static_cast<std::int32_t>(i)});
    const Tensor& g = adjoint[i];
    switch (node.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kMatVec: {
        const Tensor& W = graph.value(node.parent_a);
        const Tensor& v = graph.value(node.parent_b);
        Tensor& gw = bump(node.parent_a, W.numel());
        Tensor& gv = bump(node.parent_b, v.numel());
        for (std::size_t r = 0; r < W.rows(); ++r) {
          for (std::size_t cidx = 0; cidx < W.cols(); ++cidx) {
            gw[r * W.cols() + cidx] += g[r] * v[cidx];
            gv[cidx] += W(r, cidx) * g[r];
          }
        }
        break;
      }
      case Op::kTanh: {
        Tensor& gp = bump(node.parent_a, node.value.numel());
        for (std::size_t k = 0; k < node.value.numel(); ++k) {
          gp[k] += g[k] * (1.0 - node.value[k] * node.value[k]);
        }
        break;
      }
      case Op::kRelu: {
        const Tensor& in = graph.value(node.parent_a);
        Tensor& gp = bump(node.parent_a, in.numel());
        for (std::size_t k = 0; k < in.numel(); ++k) {
          if (in[k] > 0.0) gp[k] += g[k];
        }
        break;
      }
      case Op::kAdd: {
        Tensor& ga = bump(node.parent_a, node.value.numel());
        Tensor& gb = bump(node.parent_b, node.value.numel());
        for (std::size_t k = 0; k < node.value.numel(); ++k) {
          ga[k] += g[k];
          gb[k] += g[k];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = graph.value(node.parent_a);
        const Tensor& b = graph.value(node.parent_b);
        Tensor& ga = bump(node.parent_a, a.numel());
        Tensor& gb = bump(node.parent_b, b.numel());
        for (std::size_t k = 0; k < a.numel(); ++k) {
          ga[k] += g[k] * b[k];
          gb[k] += g[k] * a[k];
        }
        break;
      }
      case Op::kScale: {
        Tensor& gp = bump(node.parent_a, node.value.numel());
        for (std::size_t k = 0; k < node.value.numel(); ++k) {
          gp[k] += g[k] * node.factor;
        }
        break;
      }
      case Op::kSum: {
        const Tensor& in = graph.value(node.parent_a);
        Tensor& gp = bump(node.parent_a, in.numel());
        for (std::size_t k = 0; k < in.numel(); ++k) gp[k] += g[0];
        break;
      }
      case Op::kSoftmax: {
        const Tensor& s = node.value;
        Tensor& gp = bump(node.parent_a, s.numel());
        double gs = 0.0;
        for (std::size_t k = 0; k < s.numel(); ++k) gs += g[k] * s[k];
        for (std::size_t k = 0; k < s.numel(); ++k) {
          gp[k] += s[k] * (g[k] - gs);
        }
        break;
      }
      case Op::kLogSoftmax: {
        const Tensor s = deqr::softmax(graph.value(node.parent_a));
        Tensor& gp = bump(node.parent_a, s.numel());
        double gsum = 0.0;
        for (std::size_t k = 0; k < s.numel(); ++k) gsum += g[k];
        for (std::size_t k = 0; k < s.numel(); ++k) {
          gp[k] += g[k] - s[k] * gsum;
        }
        break;
      }
      case Op::kLog: {
        const Tensor& in = graph.value(node.parent_a);
        Tensor& gp = bump(node.parent_a, in.numel());
        for (std::size_t k = 0; k < in.numel(); ++k) gp[k] += g[k] / in[k];
        break;
      }
      case Op::kPick: {
        const Tensor& in = graph.value(node.parent_a);
        Tensor& gp = bump(node.parent_a, in.numel());
        gp[node.index] += g[0];
        break;
      }
    }
  }

  GradResult result;
  result.value = out_value;
  for (std::size_t i = 0; i < n; ++i) {
    const NodeId id{static_cast<std::int32_t>(i)};
    if (graph.node(id).op == Op::kLeaf) {
      result.grads[id.index] =
          touched[i] ? adjoint[i] : Tensor::zeros(graph.value(id).shape());
    }
  }
  return result;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double step) {
  if (!(step > 0.0)) throw ContractError("finite_diff_grad: step must be > 0");
  Tensor grad = Tensor::zeros({x.numel()});
  Tensor probe = x;
  for (std::size_t k = 0; k < x.numel(); ++k) {
    probe[k] = x[k] + step;
    const double hi = f(probe);
    probe[k] = x[k] - step;
    const double lo = f(probe);
    probe[k] = x[k];
    if (!std::isfinite(hi) || !std::isfinite(lo)) {
      throw NumericError("finite_diff_grad: non-finite value at probe " +
                         std::to_string(k));
    }
    grad[k] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

NodeId entropy_of_logits(ExprGraph& g, NodeId logits) {
  const NodeId p = g.softmax(logits);
  const NodeId lp = g.log_softmax(logits);
  return g.scale(g.sum(g.mul(p, lp)), -1.0);
}

NodeId cross_entropy_of_logits(ExprGraph& g, NodeId logits, int label) {
  const Tensor& v = g.value(logits);
  if (label < 0 || static_cast<std::size_t>(label) >= v.numel()) {
    throw IndexError("cross_entropy_of_logits: label out of range");
  }
  const NodeId lp = g.log_softmax(logits);
  return g.scale(g.pick(lp, static_cast<std::size_t>(label)), -1.0);
}

NodeId kl_to_reference(ExprGraph& g, NodeId logits,
                       const Tensor& reference_log_probs) {
  if (!g.value(logits).same_shape(reference_log_probs)) {
    throw DimensionError("kl_to_reference: shape mismatch");
  }
  const NodeId p = g.softmax(logits);
  const NodeId lp = g.log_softmax(logits);
  const NodeId ref = g.constant(reference_log_probs);
  const NodeId diff = g.add(lp, g.scale(ref, -1.0));
  return g.sum(g.mul(p, diff));
}

NodeId kl_between(ExprGraph& g, NodeId logits_a, NodeId logits_b) {
  const NodeId p = g.softmax(logits_a);
  const NodeId lpa = g.log_softmax(logits_a);
  const NodeId lpb = g.log_softmax(logits_b);
  const NodeId diff = g.add(lpa, g.scale(lpb, -1.0));
  return g.sum(g.mul(p, diff));
}

}  // namespace deqr
