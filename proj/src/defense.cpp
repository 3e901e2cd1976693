#include "deqr/defense.hpp"

#include <chrono>
#include <cmath>
#include <string>

#include "deqr/errors.hpp"
#include "deqr/unroll.hpp"

namespace deqr {

void DefenseConfig::validate(std::size_t solver_iterations) const {
  if (!(beta > 0.0)) throw ContractError("DefenseConfig: beta must be > 0");
  if (inner_steps < 1) throw ContractError("DefenseConfig: R must be >= 1");
  // T_f beyond N is legal and simply never fires.
  if (frequency < 1) throw ContractError("DefenseConfig: T_f must be >= 1");
  if (!(budget > 0.0)) throw ContractError("DefenseConfig: budget must be > 0");
  (void)solver_iterations;
}

InputUpdateResult input_update_step(const DeqModel& model, const Tensor& z_next,
                                    const Tensor& x_cur,
                                    const Tensor& x_received, double beta,
                                    double budget, const DomainBox& domain) {
  ExprGraph g;
  const ModelNodes m = add_model_constants(g, model);
  const NodeId xn = g.leaf(x_cur);
  const NodeId anchor = g.constant(z_next);
  const NodeId z_plus = unroll_dynamics(g, m, model.sigma, anchor, xn, 1, 1.0);
  const NodeId logits = head_node(g, m, z_plus);
  const NodeId entropy = entropy_of_logits(g, logits);
  const Tensor grad = reverse_grad(g, entropy).grad(xn);
  if (!all_finite(grad)) return {x_cur, false};

  Tensor x = x_cur;
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] -= beta * grad[i];
  x = domain.clip(clip_ball(std::move(x), x_received, budget));
  return {std::move(x), true};
}

DefenseTrace entropy_reduction_solve(const DeqModel& model,
                                     const Tensor& x_received,
                                     const SolverConfig& solver,
                                     const DefenseConfig& defense,
                                     const DomainBox& domain) {
  using clock = std::chrono::steady_clock;
  model.validate();
  solver.validate();
  if (defense.enabled) defense.validate(solver.iterations);

  DefenseTrace out;
  FixedPointStepper stepper(model, solver);
  Tensor x_cur = x_received;

  auto record = [&](const Tensor& z, const Tensor& x) {
    out.trace.states.push_back(z);
    try {
      out.trace.residuals.push_back(rel_error(model, z, x).value);
      Tensor lg = head_apply(model, z);
      out.trace.entropies.push_back(pred_entropy(lg));
      out.trace.logits.push_back(std::move(lg));
    } catch (const NumericError&) {
      const std::size_t t = out.trace.states.size() - 1;
      throw DivergenceError(
          t, "entropy_reduction_solve: non-finite diagnostics at state " +
                 std::to_string(t));
    }
    out.trace.inputs_used.push_back(x);
  };

  record(stepper.current(), x_cur);
  out.input_versions.push_back(x_cur);

  for (std::size_t t = 0; t < solver.iterations; ++t) {
    const auto solve_start = clock::now();
    Tensor next;
    try {
      next = stepper.propose(x_cur);
    } catch (const NumericError&) {
      throw DivergenceError(t + 1, "entropy_reduction_solve: non-finite state "
                                   "at iteration " + std::to_string(t + 1));
    }
    if (!all_finite(next)) {
      throw DivergenceError(t + 1, "entropy_reduction_solve: non-finite state "
                                   "at iteration " + std::to_string(t + 1));
    }
    out.solve_seconds +=
        std::chrono::duration<double>(clock::now() - solve_start).count();

    const bool intervene = defense.enabled && (t + 1) % defense.frequency == 0;
    if (intervene) {
      const auto update_start = clock::now();
      InterventionRecord rec;
      rec.state_index = t + 1;
      rec.entropy_before = pred_entropy(head_apply(model, next));
      for (std::size_t i = 0; i < defense.inner_steps; ++i) {
        InputUpdateResult step =
            input_update_step(model, next, x_cur, x_received, defense.beta,
                              defense.budget, domain);
        if (!step.gradient_ok) {
          rec.gradient_failed = true;
          break;
        }
        x_cur = std::move(step.x);
      }
      // Re-solve the state with the updated input (the updated input carries
      // forward to all later iterations).
      try {
        next = stepper.propose(x_cur);
      } catch (const NumericError&) {
        throw DivergenceError(t + 1, "entropy_reduction_solve: non-finite "
                                     "re-solve at iteration " +
                                         std::to_string(t + 1));
      }
      if (!all_finite(next)) {
        throw DivergenceError(t + 1, "entropy_reduction_solve: non-finite "
                                     "re-solve at iteration " +
                                         std::to_string(t + 1));
      }
      rec.entropy_after = pred_entropy(head_apply(model, next));
      out.interventions.push_back(rec);
      out.update_seconds +=
          std::chrono::duration<double>(clock::now() - update_start).count();
    }

    stepper.accept(std::move(next));
    record(stepper.current(), x_cur);
    out.input_versions.push_back(x_cur);

    if (solver.tol > 0.0 && out.trace.residuals.back() <= solver.tol) {
      while (out.trace.states.size() < solver.iterations + 1) {
        out.trace.states.push_back(out.trace.states.back());
        out.trace.residuals.push_back(out.trace.residuals.back());
        out.trace.logits.push_back(out.trace.logits.back());
        out.trace.entropies.push_back(out.trace.entropies.back());
        out.trace.inputs_used.push_back(out.trace.inputs_used.back());
        out.input_versions.push_back(out.input_versions.back());
      }
      break;
    }
  }
  return out;
}

std::size_t early_state_select(const DeqModel& model,
                               const LabeledBatch& validation,
                               const DomainBox& domain,
                               const AttackSpec& readymade,
                               const SolverConfig& solver) {
  if (validation.size() == 0) {
    throw ContractError("early_state_select: empty validation batch");
  }
  if (readymade.kind != AttackKind::kReadymadePgd) {
    throw ContractError("early_state_select: attack must be ready-made");
  }
  const AttackResult attack = pgd_attack(model, validation, domain, readymade,
                                         solver, solver.iterations);

  const std::size_t n_states = solver.iterations;
  std::vector<std::size_t> correct(n_states + 1, 0);
  std::size_t evaluated = 0;
  for (std::size_t j = 0; j < validation.size(); ++j) {
    try {
      const DynamicsTrace trace = solve(model, attack.adversarial[j], solver);
      ++evaluated;
      for (std::size_t t = 1; t <= n_states; ++t) {
        if (argmax(trace.logits[t]) ==
            static_cast<std::size_t>(validation.labels[j])) {
          ++correct[t];
        }
      }
    } catch (const DivergenceError&) {
      // excluded from every state's tally
    }
  }

  std::size_t best = n_states;
  for (std::size_t t = n_states; t >= 1; --t) {
    if (correct[t] > correct[best]) best = t;  // ties keep the larger index
  }
  (void)evaluated;
  return best;
}

double defended_accuracy(const DeqModel& model,
                         const std::vector<Tensor>& inputs,
                         const std::vector<int>& labels,
                         const SolverConfig& solver,
                         const DefenseConfig& defense, const DomainBox& domain,
                         std::size_t prediction_state,
                         std::size_t* failed_solves) {
  if (inputs.size() != labels.size()) {
    throw ContractError("defended_accuracy: inputs and labels differ");
  }
  std::size_t n_correct = 0;
  std::size_t n_evaluated = 0;
  std::size_t n_failed = 0;
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    try {
      const DefenseTrace dt =
          entropy_reduction_solve(model, inputs[j], solver, defense, domain);
      ++n_evaluated;
      if (argmax(dt.trace.logits[prediction_state]) ==
          static_cast<std::size_t>(labels[j])) {
        ++n_correct;
      }
    } catch (const DivergenceError&) {
      ++n_failed;
    }
  }
  if (failed_solves != nullptr) *failed_solves = n_failed;
  return n_evaluated == 0 ? 0.0
                          : static_cast<double>(n_correct) /
                                static_cast<double>(n_evaluated);
}

}  // namespace deqr
