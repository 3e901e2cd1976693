#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deqr/attacks.hpp"
#include "deqr/dataset.hpp"
#include "deqr/defense.hpp"
#include "deqr/metrics.hpp"
#include "deqr/solver.hpp"
#include "deqr/training.hpp"

namespace deqr {

struct ExperimentConfig {
  std::string origin;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  std::vector<std::string> stages;  // subset of gen-data, train, attack,
                                    // defend, report; empty = validate only

  // dataset
  DatasetKind dataset_kind = DatasetKind::kGaussianBlobs;
  std::size_t dataset_n = 600;
  double dataset_noise = 0.25;
  std::size_t num_classes = 3;
  std::string dataset_csv;  // when set, ingest this file instead
  double csv_domain_lo = -3.0;
  double csv_domain_hi = 3.0;

  // model
  std::size_t state_dim = 16;
  Nonlinearity sigma = Nonlinearity::kTanh;
  double gamma = 0.9;

  SolverConfig solver;
  TrainConfig training;

  // attack: epsilon/alpha defaults follow the pixel convention; when
  // margin_fraction > 0 and the dataset carries a margin, epsilon is
  // re-derived as margin_fraction * margin with alpha = epsilon / 4.
  AttackSpec attack_base;
  double margin_fraction = 0.25;

  DefenseConfig defense;

  // eval: "final", "auto" (early-state selection on the validation split),
  // or an explicit state index.
  std::string prediction_state = "final";
  bool entropy_at_early_state = false;
};

ExperimentConfig parse_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config_text(const std::string& text,
                                              const std::string& origin);

// Applies the margin-scaled budget rule to the attack, training, and defense
// epsilons for a concrete dataset.
void resolve_budgets(ExperimentConfig& cfg, const Dataset& ds);

// Saved adversarial batches, enough to re-run them against any checkpoint.
struct SavedAttack {
  std::string tag;
  AttackSpec spec;
  LabeledBatch batch;
};
void save_attacks(const std::string& path, const std::vector<SavedAttack>& all);
std::vector<SavedAttack> load_attacks(const std::string& path);

// Executes the configured stages in order; returns a process exit status.
// Any stage failure writes <out_dir>/error.log and returns nonzero, keeping
// partial artifacts in place.
int run_experiment(const ExperimentConfig& cfg);
// Restrict to a single stage (CLI --stage).
int run_experiment(const ExperimentConfig& cfg, const std::string& only_stage);

struct GradCheckSummary {
  std::size_t instances = 0;
  double max_rel_error_unrolled_ce = 0.0;
  double max_rel_error_entropy_objective = 0.0;
  double max_rel_error_trades = 0.0;

  double worst() const;
  bool passed(double tolerance) const { return worst() <= tolerance; }
};

// Cross-checks reverse-mode gradients against central finite differences on
// random small instances: (a) cross-entropy through the unrolled tail with
// respect to every parameter and the input, (b) the input-entropy objective
// with respect to the input, (c) the TRADES loss with respect to every
// parameter.
GradCheckSummary run_gradcheck(std::size_t instances, std::uint64_t seed);

}  // namespace deqr
