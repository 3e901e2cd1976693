#pragma once

#include <cstdint>
#include <vector>

#include "deqr/model.hpp"
#include "deqr/tensor.hpp"

namespace deqr {

enum class SolveMethod : std::uint8_t { kNaive = 0, kAnderson = 1 };

struct SolverConfig {
  std::size_t iterations = 8;  // N
  SolveMethod method = SolveMethod::kAnderson;
  double damping = 1.0;        // naive solver mixing
  std::size_t anderson_depth = 5;
  double anderson_mix = 1.0;
  // Early-stop residual threshold; 0 disables. The trace is padded with the
  // converged state so it always has iterations + 1 entries.
  double tol = 0.0;

  void validate() const;
};

// The states z^[0..N] of one forward solve plus per-state diagnostics. All
// lists have N + 1 entries; entry t describes state t, and inputs_used[t] is
// the input that produced it (entry 0 carries the received input).
struct DynamicsTrace {
  std::vector<Tensor> states;
  std::vector<double> residuals;
  std::vector<Tensor> logits;
  std::vector<double> entropies;
  std::vector<Tensor> inputs_used;

  std::size_t iteration_count() const { return states.empty() ? 0 : states.size() - 1; }
  const Tensor& final_state() const { return states.back(); }
  const Tensor& final_logits() const { return logits.back(); }
};

// One solver iteration at a time. propose() computes the candidate next state
// from the committed history and a given input without mutating anything;
// accept() commits it. The batch solvers below and the test-time defense both
// drive their iterations through this class, so a defended run with no
// interventions is byte-identical to the plain solve.
class FixedPointStepper {
 public:
  FixedPointStepper(const DeqModel& model, const SolverConfig& cfg);

  Tensor propose(const Tensor& x) const;
  void accept(Tensor next_state);

  std::size_t committed() const { return history_.size() - 1; }
  const Tensor& current() const { return history_.back(); }
  const std::vector<Tensor>& history() const { return history_; }

 private:
  Tensor anderson_propose(const Tensor& x) const;

  const DeqModel& model_;
  const SolverConfig& cfg_;
  std::vector<Tensor> history_;  // committed states, z^[0] = 0 first
};

DynamicsTrace solve_naive(const DeqModel& model, const Tensor& x,
                          const SolverConfig& cfg);
DynamicsTrace solve_anderson(const DeqModel& model, const Tensor& x,
                             const SolverConfig& cfg);
// Dispatch on cfg.method.
DynamicsTrace solve(const DeqModel& model, const Tensor& x,
                    const SolverConfig& cfg);

}  // namespace deqr
