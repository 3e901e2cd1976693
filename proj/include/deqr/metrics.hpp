#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deqr/attacks.hpp"
#include "deqr/defense.hpp"
#include "deqr/model.hpp"
#include "deqr/solver.hpp"

namespace deqr {

// Exactly rounded sum of doubles (Shewchuk partials). Independent of operand
// order and exactly antisymmetric under negation, which the aggregate metrics
// below rely on.
double exact_sum(std::span<const double> values);
double exact_mean(std::span<const double> values);

// Percentage of pairs with clean entropy strictly below the adversarial one.
double metric_P(std::span<const double> clean_entropies,
                std::span<const double> adv_entropies);
// Complement using >=; metric_P(a, b) + metric_P_geq(b, a) == 100.
double metric_P_geq(std::span<const double> clean_entropies,
                    std::span<const double> adv_entropies);
// Mean of clean minus adversarial entropy.
double metric_dH(std::span<const double> clean_entropies,
                 std::span<const double> adv_entropies);

// Per-state relative difference |adv_z - clean_z| / max(|clean_z|, 1e-12).
std::vector<double> dynamics_deviation(const DynamicsTrace& clean,
                                       const DynamicsTrace& adv);

// Checks the triangle-inequality decomposition of the state deviation at
// every step of two plain-iteration traces; returns the largest violation
// (<= 0 when the bound holds everywhere).
double perturbation_decomposition_gap(const DeqModel& model,
                                      const DynamicsTrace& clean,
                                      const DynamicsTrace& adv);

struct EntropyProfile {
  std::vector<double> mean;  // one entry per state 0..N
  std::vector<double> q10;
  std::vector<double> q50;
  std::vector<double> q90;
};

// Per-state mean and nearest-rank percentiles over a batch of traces.
EntropyProfile entropy_profile(const std::vector<DynamicsTrace>& traces);

struct GridCellStats {
  std::size_t state_index = 0;
  std::size_t unroll_steps = 0;
  double damping = 1.0;
  double accuracy = 0.0;
};

struct StatsSummary {
  double avg = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct DefenseReport {
  bool enabled = false;
  double clean_accuracy = 0.0;
  double readymade_accuracy = 0.0;
  double grid_min_accuracy = 0.0;
  double mean_entropy_undefended = 0.0;  // at z^[N] under the strongest attack
  double mean_entropy_defended = 0.0;
  std::size_t failed_solves = 0;
};

struct EvalReport {
  double clean_accuracy = 0.0;
  double readymade_pgd_accuracy = 0.0;
  double grid_min_accuracy = 0.0;
  AttackSpec grid_argmin;
  std::vector<GridCellStats> grid_cells;
  std::vector<double> per_state_clean_accuracy;    // index 1..N used
  std::vector<double> per_state_robust_accuracy;   // under ready-made PGD
  double P = 0.0;        // strongest grid attack, equilibrium entropies
  double delta_H = 0.0;
  StatsSummary P_over_grid;
  StatsSummary dH_over_grid;
  EntropyProfile clean_entropy_profile;
  EntropyProfile readymade_entropy_profile;
  EntropyProfile grid_argmin_entropy_profile;
  std::vector<double> deviation_profile;  // mean relative deviation per state
  std::size_t failed_solves = 0;
  DefenseReport defense;
};

struct EvalConfig {
  SolverConfig solver;
  AttackSpec attack_base;     // fixes steps / alpha / epsilon / seed
  DefenseConfig defense;
  std::size_t prediction_state = 0;  // 0 means the final state
  bool entropy_at_early_state = false;  // P / dH at the early state instead
};

EvalReport build_eval_report(const DeqModel& model, const LabeledBatch& test,
                             const DomainBox& domain, const EvalConfig& cfg);

}  // namespace deqr
