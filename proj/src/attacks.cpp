#include "deqr/attacks.hpp"

#include <cmath>
#include <string>

#include "deqr/errors.hpp"
#include "deqr/rng.hpp"
#include "deqr/unroll.hpp"

namespace deqr {

void AttackSpec::validate(std::size_t solver_iterations) const {
  if (budget < 0.0) throw ContractError("AttackSpec: budget must be >= 0");
  if (steps > 0 && !(step_size > 0.0 && step_size <= budget) && budget > 0.0) {
    throw ContractError("AttackSpec: need 0 < step_size <= budget");
  }
  if (kind == AttackKind::kIntermediatePgd) {
    if (state_index < 1 || state_index > solver_iterations) {
      throw ContractError("AttackSpec: intermediate state index " +
                          std::to_string(state_index) + " outside 1.." +
                          std::to_string(solver_iterations));
    }
    if (unroll_steps < 1 || unroll_steps > GridResult::kMaxUnroll) {
      throw ContractError("AttackSpec: unroll steps outside 1..9");
    }
    if (damping != 0.5 && damping != 1.0) {
      throw ContractError("AttackSpec: damping must be 0.5 or 1.0");
    }
  } else {
    if (unroll_steps < 1 || unroll_steps > solver_iterations) {
      throw ContractError(
          "AttackSpec: readymade unroll steps must lie in 1..N");
    }
  }
}

Tensor attack_gradient(const DeqModel& model, const DynamicsTrace& trace,
                       const Tensor& x, int label, const AttackSpec& spec,
                       const Tensor* clean_log_probs) {
  const std::size_t n = trace.iteration_count();
  std::size_t anchor_index = 0;
  std::size_t steps = 0;
  double damping = 1.0;
  switch (spec.kind) {
    case AttackKind::kIntermediatePgd:
      if (spec.state_index > n) {
        throw ContractError("attack_gradient: state index beyond trace");
      }
      anchor_index = spec.state_index;
      steps = spec.unroll_steps;
      damping = spec.damping;
      break;
    case AttackKind::kReadymadePgd:
    case AttackKind::kTradesKlPgd:
      if (spec.unroll_steps > n) {
        throw ContractError("attack_gradient: unroll steps beyond trace");
      }
      anchor_index = n - spec.unroll_steps;
      steps = spec.unroll_steps;
      damping = 1.0;
      break;
  }
  if (spec.kind == AttackKind::kTradesKlPgd && clean_log_probs == nullptr) {
    throw ContractError(
        "attack_gradient: TRADES kind requires the clean distribution");
  }
  if (spec.kind != AttackKind::kTradesKlPgd && clean_log_probs != nullptr) {
    throw ContractError(
        "attack_gradient: clean distribution is only for the TRADES kind");
  }

  ExprGraph g;
  const ModelNodes m = add_model_constants(g, model);
  const NodeId xn = g.leaf(x);
  const NodeId anchor = g.constant(trace.states[anchor_index]);
  const NodeId z_end =
      unroll_dynamics(g, m, model.sigma, anchor, xn, steps, damping);
  const NodeId logits = head_node(g, m, z_end);
  const NodeId loss =
      spec.kind == AttackKind::kTradesKlPgd
          ? kl_to_reference(g, logits, *clean_log_probs)
          : cross_entropy_of_logits(g, logits, label);
  return reverse_grad(g, loss).grad(xn);
}

namespace {

int sign_of(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

// Shared PGD driver; `clean_log_probs` is non-null only for the TRADES kind.
AttackResult run_pgd(const DeqModel& model, const LabeledBatch& batch,
                     const DomainBox& domain, const AttackSpec& spec,
                     const SolverConfig& solver,
                     std::size_t prediction_state) {
  spec.validate(solver.iterations);
  if (prediction_state > solver.iterations) {
    throw ContractError("pgd_attack: prediction state beyond trace");
  }
  if (batch.inputs.size() != batch.labels.size()) {
    throw ContractError("pgd_attack: inputs and labels differ in length");
  }

  AttackResult result;
  result.spec = spec;
  result.adversarial.reserve(batch.size());
  result.correct.assign(batch.size(), 0);
  result.evaluated.assign(batch.size(), 0);

  std::size_t n_correct = 0;
  std::size_t n_evaluated = 0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const Tensor& x0 = batch.inputs[j];
    const int label = batch.labels[j];
    Rng rng(spec.seed ^ static_cast<std::uint64_t>(j));

    Tensor x_adv = x0;
    bool failed = false;
    if (spec.steps > 0) {
      if (spec.random_start && spec.budget > 0.0) {
        for (std::size_t i = 0; i < x_adv.numel(); ++i) {
          x_adv[i] += rng.uniform(-spec.budget, spec.budget);
        }
        x_adv = domain.clip(std::move(x_adv));
      }
      for (std::size_t step = 0; step < spec.steps && !failed; ++step) {
        try {
          const DynamicsTrace trace = solve(model, x_adv, solver);
          Tensor clean_lp;
          const Tensor* ref = nullptr;
          if (spec.kind == AttackKind::kTradesKlPgd) {
            const DynamicsTrace clean_trace = solve(model, x0, solver);
            clean_lp = log_softmax(clean_trace.final_logits());
            ref = &clean_lp;
          }
          const Tensor grad =
              attack_gradient(model, trace, x_adv, label, spec, ref);
          for (std::size_t i = 0; i < x_adv.numel(); ++i) {
            x_adv[i] += spec.step_size * sign_of(grad[i]);
          }
          x_adv = domain.clip(clip_ball(std::move(x_adv), x0, spec.budget));
        } catch (const DivergenceError&) {
          failed = true;
        }
      }
    }

    if (!failed) {
      try {
        const DynamicsTrace trace = solve(model, x_adv, solver);
        const bool ok =
            argmax(trace.logits[prediction_state]) ==
            static_cast<std::size_t>(label);
        result.evaluated[j] = 1;
        ++n_evaluated;
        if (ok) {
          result.correct[j] = 1;
          ++n_correct;
        }
      } catch (const DivergenceError&) {
        failed = true;
      }
    }
    if (failed) ++result.failed_solves;
    result.adversarial.push_back(std::move(x_adv));
  }

  result.accuracy = n_evaluated == 0
                        ? 0.0
                        : static_cast<double>(n_correct) /
                              static_cast<double>(n_evaluated);
  return result;
}

}  // namespace

AttackResult pgd_attack(const DeqModel& model, const LabeledBatch& batch,
                        const DomainBox& domain, const AttackSpec& spec,
                        const SolverConfig& solver,
                        std::size_t prediction_state) {
  if (spec.kind == AttackKind::kTradesKlPgd) {
    return trades_inner_max(model, batch, domain, spec, solver,
                            prediction_state);
  }
  return run_pgd(model, batch, domain, spec, solver, prediction_state);
}

AttackResult trades_inner_max(const DeqModel& model, const LabeledBatch& batch,
                              const DomainBox& domain, const AttackSpec& spec,
                              const SolverConfig& solver,
                              std::size_t prediction_state) {
  if (spec.kind != AttackKind::kTradesKlPgd) {
    throw ContractError("trades_inner_max: spec kind must be trades_kl_pgd");
  }
  return run_pgd(model, batch, domain, spec, solver, prediction_state);
}

GridResult run_attack_grid(const DeqModel& model, const LabeledBatch& batch,
                           const DomainBox& domain, const AttackSpec& base,
                           const SolverConfig& solver,
                           std::size_t prediction_state) {
  GridResult grid;
  grid.cells.reserve(solver.iterations * GridResult::kMaxUnroll * 2);
  bool first = true;
  for (std::size_t i = 1; i <= solver.iterations; ++i) {
    for (std::size_t ka = 1; ka <= GridResult::kMaxUnroll; ++ka) {
      for (double lambda : GridResult::kDampings) {
        AttackSpec spec = base;
        spec.kind = AttackKind::kIntermediatePgd;
        spec.state_index = i;
        spec.unroll_steps = ka;
        spec.damping = lambda;
        AttackResult cell =
            pgd_attack(model, batch, domain, spec, solver, prediction_state);
        if (first || cell.accuracy < grid.min_accuracy) {
          grid.min_accuracy = cell.accuracy;
          grid.argmin = spec;
          first = false;
        }
        grid.cells.push_back(std::move(cell));
      }
    }
  }
  return grid;
}

double evaluate_accuracy(const DeqModel& model,
                         const std::vector<Tensor>& inputs,
                         const std::vector<int>& labels,
                         const SolverConfig& solver,
                         std::size_t prediction_state,
                         std::size_t* failed_solves) {
  if (inputs.size() != labels.size()) {
    throw ContractError("evaluate_accuracy: inputs and labels differ");
  }
  std::size_t n_correct = 0;
  std::size_t n_evaluated = 0;
  std::size_t n_failed = 0;
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    try {
      const DynamicsTrace trace = solve(model, inputs[j], solver);
      ++n_evaluated;
      if (argmax(trace.logits[prediction_state]) ==
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
