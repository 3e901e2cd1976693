#pragma once

#include "deqr/expr.hpp"
#include "deqr/model.hpp"
#include "deqr/solver.hpp"

namespace deqr {

// Graph handles for one model's parameters.
struct ModelNodes {
  NodeId W, U, b, V, c;
};

// Parameters as differentiable leaves.
ModelNodes add_model_leaves(ExprGraph& g, const DeqModel& model);
// Parameters as constants (for input-only gradients).
ModelNodes add_model_constants(ExprGraph& g, const DeqModel& model);

// Builds z' = (1 - damping) z + damping sigma(W z + U x + b) applied `steps`
// times starting from z_start, and returns the endpoint node.
NodeId unroll_dynamics(ExprGraph& g, const ModelNodes& m, Nonlinearity sigma,
                       NodeId z_start, NodeId x, std::size_t steps,
                       double damping);

// V z + c
NodeId head_node(ExprGraph& g, const ModelNodes& m, NodeId z);

struct PhantomGrad {
  double loss = 0.0;
  Tensor w_grad, u_grad, b_grad, v_grad, c_grad, x_grad;
};

// Training gradient through a short unrolled tail: re-applies the layer
// `unroll_steps` times from trace.states[loss_state] held constant, puts
// cross-entropy on the endpoint through the head, and differentiates with
// respect to every parameter and the input.
PhantomGrad phantom_grad(const DeqModel& model, const DynamicsTrace& trace,
                         const Tensor& x, std::size_t loss_state, int label,
                         std::size_t unroll_steps);

}  // namespace deqr
