#pragma once

#include <cstdint>
#include <vector>

#include "deqr/attacks.hpp"
#include "deqr/data.hpp"
#include "deqr/model.hpp"
#include "deqr/solver.hpp"

namespace deqr {

struct DefenseConfig {
  double beta = 2.0 / 255.0;   // entropy-descent step size
  std::size_t inner_steps = 10;  // R
  std::size_t frequency = 2;     // T_f, intervene every T_f solver steps
  double budget = 8.0 / 255.0;   // update ball around the received input
  bool enabled = true;

  void validate(std::size_t solver_iterations) const;
};

struct InterventionRecord {
  std::size_t state_index = 0;   // the t+1 whose input was updated
  double entropy_before = 0.0;   // H at z^[t+1] before the update
  double entropy_after = 0.0;    // H at the re-solved z^[t+1]
  bool gradient_failed = false;  // a non-finite gradient froze the input
};

struct DefenseTrace {
  DynamicsTrace trace;
  std::vector<InterventionRecord> interventions;
  std::vector<Tensor> input_versions;  // x^[t], N + 1 entries
  double solve_seconds = 0.0;
  double update_seconds = 0.0;
};

struct InputUpdateResult {
  Tensor x;
  bool gradient_ok = true;
};

// One projected descent step on H(h(f(z_next; x))) with z_next constant:
// x - beta * grad, projected onto the budget ball around the received input,
// then clipped to the data domain. A non-finite gradient returns the input
// unchanged with gradient_ok = false.
InputUpdateResult input_update_step(const DeqModel& model, const Tensor& z_next,
                                    const Tensor& x_cur,
                                    const Tensor& x_received, double beta,
                                    double budget, const DomainBox& domain);

// Interleaves the forward solve with input entropy reduction: every
// `frequency` iterations the input takes `inner_steps` descent steps against
// the tentative next state, and that state is re-solved with the updated
// input. With the defense disabled (or no intervention firing) the trace is
// byte-identical to the plain solver's.
DefenseTrace entropy_reduction_solve(const DeqModel& model,
                                     const Tensor& x_received,
                                     const SolverConfig& solver,
                                     const DefenseConfig& defense,
                                     const DomainBox& domain);

// Robust accuracy per state under a ready-made attack; returns the argmax
// state index, ties resolved toward the largest index.
std::size_t early_state_select(const DeqModel& model,
                               const LabeledBatch& validation,
                               const DomainBox& domain,
                               const AttackSpec& readymade,
                               const SolverConfig& solver);

// Accuracy of defended predictions (at the final state) over saved inputs.
double defended_accuracy(const DeqModel& model,
                         const std::vector<Tensor>& inputs,
                         const std::vector<int>& labels,
                         const SolverConfig& solver,
                         const DefenseConfig& defense, const DomainBox& domain,
                         std::size_t prediction_state,
                         std::size_t* failed_solves = nullptr);

}  // namespace deqr
