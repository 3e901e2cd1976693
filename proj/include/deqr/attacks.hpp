#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "deqr/data.hpp"
#include "deqr/model.hpp"
#include "deqr/solver.hpp"

namespace deqr {

enum class AttackKind : std::uint8_t {
  kReadymadePgd = 0,    // gradient through the default unrolled tail at z^[N]
  kIntermediatePgd = 1, // gradient through a damped unroll of z^[i]
  kTradesKlPgd = 2,     // KL(p_adv || p_clean) at the final state
};

struct AttackSpec {
  AttackKind kind = AttackKind::kReadymadePgd;
  std::size_t state_index = 0;   // i, intermediate only
  std::size_t unroll_steps = 5;  // K_a
  double damping = 1.0;          // lambda, intermediate only
  std::size_t steps = 10;
  double step_size = 2.0 / 255.0;  // alpha
  double budget = 8.0 / 255.0;     // epsilon, inf-norm
  bool random_start = true;
  std::uint64_t seed = 0;

  void validate(std::size_t solver_iterations) const;
};

struct AttackResult {
  std::vector<Tensor> adversarial;
  std::vector<std::uint8_t> correct;    // per example, at the prediction state
  std::vector<std::uint8_t> evaluated;  // false when the forward solve diverged
  double accuracy = 0.0;                // correct / evaluated
  std::size_t failed_solves = 0;
  AttackSpec spec;
};

// Loss gradient with respect to the input for one example. The anchor state
// is taken from `trace` and held constant; the unrolled continuation, head,
// and loss are differentiable graph nodes. For the TRADES kind the caller
// supplies the clean log-probabilities, which are held fixed.
Tensor attack_gradient(const DeqModel& model, const DynamicsTrace& trace,
                       const Tensor& x, int label, const AttackSpec& spec,
                       const Tensor* clean_log_probs = nullptr);

// Projected sign-ascent in the epsilon-ball intersected with the data domain.
// Accuracy is evaluated at `prediction_state`. Examples whose forward solve
// diverges are tallied and excluded from the accuracy denominator.
AttackResult pgd_attack(const DeqModel& model, const LabeledBatch& batch,
                        const DomainBox& domain, const AttackSpec& spec,
                        const SolverConfig& solver, std::size_t prediction_state);

struct GridResult {
  std::vector<AttackResult> cells;  // i-major, then unroll steps, then damping
  double min_accuracy = 1.0;
  AttackSpec argmin;

  static constexpr std::size_t kMaxUnroll = 9;
  static constexpr double kDampings[2] = {0.5, 1.0};
};

// All (i, K_a, lambda) intermediate attacks: i in 1..N, K_a in 1..9,
// lambda in {0.5, 1.0}; N * 18 cells.
GridResult run_attack_grid(const DeqModel& model, const LabeledBatch& batch,
                           const DomainBox& domain, const AttackSpec& base,
                           const SolverConfig& solver,
                           std::size_t prediction_state);

// PGD ascent on KL(p_adv || p_clean) at the final state; the clean
// distribution is computed once per example and held fixed.
AttackResult trades_inner_max(const DeqModel& model, const LabeledBatch& batch,
                              const DomainBox& domain, const AttackSpec& spec,
                              const SolverConfig& solver,
                              std::size_t prediction_state);

// Re-score saved adversarial inputs against a model (transfer evaluation or
// defended evaluation both reduce to this).
double evaluate_accuracy(const DeqModel& model, const std::vector<Tensor>& inputs,
                         const std::vector<int>& labels,
                         const SolverConfig& solver,
                         std::size_t prediction_state,
                         std::size_t* failed_solves = nullptr);

}  // namespace deqr
