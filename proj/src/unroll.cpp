#include "deqr/unroll.hpp"

#include <string>

#include "deqr/errors.hpp"

namespace deqr {

ModelNodes add_model_leaves(ExprGraph& g, const DeqModel& model) {
  return {g.leaf(model.W), g.leaf(model.U), g.leaf(model.b), g.leaf(model.V),
          g.leaf(model.c)};
}

ModelNodes add_model_constants(ExprGraph& g, const DeqModel& model) {
  return {g.constant(model.W), g.constant(model.U), g.constant(model.b),
          g.constant(model.V), g.constant(model.c)};
}

NodeId unroll_dynamics(ExprGraph& g, const ModelNodes& m, Nonlinearity sigma,
                       NodeId z_start, NodeId x, std::size_t steps,
                       double damping) {
  if (!(damping > 0.0 && damping <= 1.0)) {
    throw ContractError("unroll_dynamics: damping must lie in (0, 1]");
  }
  NodeId z = z_start;
  for (std::size_t step = 0; step < steps; ++step) {
    NodeId pre = g.add(g.add(g.matvec(m.W, z), g.matvec(m.U, x)), m.b);
    NodeId fz = pre;
    switch (sigma) {
      case Nonlinearity::kTanh:
        fz = g.tanh(pre);
        break;
      case Nonlinearity::kRelu:
        fz = g.relu(pre);
        break;
      case Nonlinearity::kIdentity:
        break;
    }
    if (damping == 1.0) {
      z = fz;
    } else {
      z = g.add(g.scale(z, 1.0 - damping), g.scale(fz, damping));
    }
  }
  return z;
}

NodeId head_node(ExprGraph& g, const ModelNodes& m, NodeId z) {
  return g.affine(m.V, z, m.c);
}

PhantomGrad phantom_grad(const DeqModel& model, const DynamicsTrace& trace,
                         const Tensor& x, std::size_t loss_state, int label,
                         std::size_t unroll_steps) {
  if (loss_state < 1 || loss_state >= trace.states.size()) {
    throw IndexError("phantom_grad: loss_state " + std::to_string(loss_state) +
                     " out of range 1.." +
                     std::to_string(trace.iteration_count()));
  }
  if (unroll_steps < 1) {
    throw ContractError("phantom_grad: unroll_steps must be >= 1");
  }

  ExprGraph g;
  const ModelNodes m = add_model_leaves(g, model);
  const NodeId xn = g.leaf(x);
  const NodeId anchor = g.constant(trace.states[loss_state]);
  const NodeId z_end =
      unroll_dynamics(g, m, model.sigma, anchor, xn, unroll_steps, 1.0);
  const NodeId logits = head_node(g, m, z_end);
  const NodeId loss = cross_entropy_of_logits(g, logits, label);

  const GradResult res = reverse_grad(g, loss);
  PhantomGrad out;
  out.loss = res.value.scalar_value();
  out.w_grad = res.grad(m.W);
  out.u_grad = res.grad(m.U);
  out.b_grad = res.grad(m.b);
  out.v_grad = res.grad(m.V);
  out.c_grad = res.grad(m.c);
  out.x_grad = res.grad(xn);
  return out;
}

}  // namespace deqr
