#include "deqr/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "deqr/errors.hpp"

namespace deqr {

double exact_sum(std::span<const double> values) {
  // Shewchuk's grow-expansion with the fsum final correction: the result is
  // the correctly rounded value of the exact real sum.
  std::vector<double> partials;
  for (double x : values) {
    std::size_t used = 0;
    for (double y : partials) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[used++] = lo;
      x = hi;
    }
    partials.resize(used);
    partials.push_back(x);
  }

  double hi = 0.0;
  std::size_t n = partials.size();
  if (n > 0) {
    double lo = 0.0;
    hi = partials[--n];
    while (n > 0) {
      const double x = hi;
      const double y = partials[--n];
      hi = x + y;
      const double yr = hi - x;
      lo = y - yr;
      if (lo != 0.0) break;
    }
    // Round-half-even correction against the next partial down.
    if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) ||
                  (lo > 0.0 && partials[n - 1] > 0.0))) {
      const double y = lo * 2.0;
      const double x = hi + y;
      if (y == x - hi) hi = x;
    }
  }
  return hi;
}

double exact_mean(std::span<const double> values) {
  if (values.empty()) throw ContractError("exact_mean: empty input");
  return exact_sum(values) / static_cast<double>(values.size());
}

namespace {

void require_paired(std::span<const double> a, std::span<const double> b,
                    const char* where) {
  if (a.size() != b.size() || a.empty()) {
    throw ContractError(std::string(where) +
                        ": entropy lists must be paired and non-empty");
  }
}

}  // namespace

double metric_P(std::span<const double> clean_entropies,
                std::span<const double> adv_entropies) {
  require_paired(clean_entropies, adv_entropies, "metric_P");
  std::size_t count = 0;
  for (std::size_t j = 0; j < clean_entropies.size(); ++j) {
    if (clean_entropies[j] < adv_entropies[j]) ++count;
  }
  return 100.0 * static_cast<double>(count) /
         static_cast<double>(clean_entropies.size());
}

double metric_P_geq(std::span<const double> clean_entropies,
                    std::span<const double> adv_entropies) {
  require_paired(clean_entropies, adv_entropies, "metric_P_geq");
  std::size_t count = 0;
  for (std::size_t j = 0; j < clean_entropies.size(); ++j) {
    if (clean_entropies[j] >= adv_entropies[j]) ++count;
  }
  return 100.0 * static_cast<double>(count) /
         static_cast<double>(clean_entropies.size());
}

double metric_dH(std::span<const double> clean_entropies,
                 std::span<const double> adv_entropies) {
  require_paired(clean_entropies, adv_entropies, "metric_dH");
  std::vector<double> diffs(clean_entropies.size());
  for (std::size_t j = 0; j < diffs.size(); ++j) {
    diffs[j] = clean_entropies[j] - adv_entropies[j];
  }
  return exact_mean(diffs);
}

std::vector<double> dynamics_deviation(const DynamicsTrace& clean,
                                       const DynamicsTrace& adv) {
  if (clean.states.size() != adv.states.size()) {
    throw ContractError("dynamics_deviation: traces differ in length");
  }
  std::vector<double> out(clean.states.size());
  for (std::size_t t = 0; t < out.size(); ++t) {
    const double denom = std::max(norm2(clean.states[t]), 1e-12);
    out[t] = norm2(sub(adv.states[t], clean.states[t])) / denom;
  }
  return out;
}

double perturbation_decomposition_gap(const DeqModel& model,
                                      const DynamicsTrace& clean,
                                      const DynamicsTrace& adv) {
  if (clean.states.size() != adv.states.size()) {
    throw ContractError(
        "perturbation_decomposition_gap: traces differ in length");
  }
  double worst = -1.0;
  for (std::size_t t = 0; t + 1 < clean.states.size(); ++t) {
    const Tensor& x = clean.inputs_used[t + 1];
    const Tensor& x_adv = adv.inputs_used[t + 1];
    const double lhs = norm2(sub(adv.states[t + 1], clean.states[t + 1]));
    const double from_input =
        norm2(sub(layer_apply(model, adv.states[t], x_adv),
                  layer_apply(model, adv.states[t], x)));
    const double accumulated =
        norm2(sub(layer_apply(model, adv.states[t], x),
                  layer_apply(model, clean.states[t], x)));
    worst = std::max(worst, lhs - (from_input + accumulated));
  }
  return worst;
}

namespace {

double nearest_rank(std::vector<double> sorted_values, double q) {
  std::sort(sorted_values.begin(), sorted_values.end());
  const std::size_t n = sorted_values.size();
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(q * static_cast<double>(n)));
  if (rank < 1) rank = 1;
  if (rank > n) rank = n;
  return sorted_values[rank - 1];
}

}  // namespace

EntropyProfile entropy_profile(const std::vector<DynamicsTrace>& traces) {
  if (traces.empty()) throw ContractError("entropy_profile: empty batch");
  const std::size_t len = traces.front().entropies.size();
  for (const auto& t : traces) {
    if (t.entropies.size() != len) {
      throw ContractError("entropy_profile: traces differ in length");
    }
  }
  EntropyProfile profile;
  profile.mean.resize(len);
  profile.q10.resize(len);
  profile.q50.resize(len);
  profile.q90.resize(len);
  std::vector<double> column(traces.size());
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t j = 0; j < traces.size(); ++j) {
      column[j] = traces[j].entropies[t];
    }
    profile.mean[t] = exact_mean(column);
    profile.q10[t] = nearest_rank(column, 0.10);
    profile.q50[t] = nearest_rank(column, 0.50);
    profile.q90[t] = nearest_rank(column, 0.90);
  }
  return profile;
}

namespace {

struct EntropyPair {
  std::vector<double> clean;
  std::vector<double> adv;
};

// Equilibrium (or early-state) entropies of clean inputs and of the given
// adversarial inputs, skipping examples whose solve diverges.
EntropyPair paired_entropies(const DeqModel& model,
                             const std::vector<Tensor>& clean_inputs,
                             const std::vector<Tensor>& adv_inputs,
                             const SolverConfig& solver, std::size_t state) {
  EntropyPair out;
  for (std::size_t j = 0; j < clean_inputs.size(); ++j) {
    try {
      const DynamicsTrace ct = solve(model, clean_inputs[j], solver);
      const DynamicsTrace at = solve(model, adv_inputs[j], solver);
      out.clean.push_back(ct.entropies[state]);
      out.adv.push_back(at.entropies[state]);
    } catch (const DivergenceError&) {
    }
  }
  return out;
}

}  // namespace

EvalReport build_eval_report(const DeqModel& model, const LabeledBatch& test,
                             const DomainBox& domain, const EvalConfig& cfg) {
  if (test.size() == 0) throw ContractError("build_eval_report: empty batch");
  cfg.solver.validate();
  const std::size_t n_states = cfg.solver.iterations;
  const std::size_t prediction_state =
      cfg.prediction_state == 0 ? n_states : cfg.prediction_state;
  const std::size_t entropy_state =
      cfg.entropy_at_early_state ? prediction_state : n_states;

  EvalReport report;

  // Clean pass: accuracy, per-state accuracy, entropy profile.
  std::vector<DynamicsTrace> clean_traces;
  clean_traces.reserve(test.size());
  std::vector<std::size_t> clean_ok;
  {
    std::vector<std::size_t> per_state_correct(n_states + 1, 0);
    std::size_t evaluated = 0;
    std::size_t correct_at_prediction = 0;
    for (std::size_t j = 0; j < test.size(); ++j) {
      try {
        DynamicsTrace t = solve(model, test.inputs[j], cfg.solver);
        ++evaluated;
        for (std::size_t s = 1; s <= n_states; ++s) {
          if (argmax(t.logits[s]) ==
              static_cast<std::size_t>(test.labels[j])) {
            ++per_state_correct[s];
          }
        }
        if (argmax(t.logits[prediction_state]) ==
            static_cast<std::size_t>(test.labels[j])) {
          ++correct_at_prediction;
        }
        clean_traces.push_back(std::move(t));
        clean_ok.push_back(j);
      } catch (const DivergenceError&) {
        ++report.failed_solves;
      }
    }
    report.clean_accuracy =
        evaluated == 0 ? 0.0
                       : static_cast<double>(correct_at_prediction) /
                             static_cast<double>(evaluated);
    report.per_state_clean_accuracy.assign(n_states + 1, 0.0);
    for (std::size_t s = 1; s <= n_states; ++s) {
      report.per_state_clean_accuracy[s] =
          evaluated == 0 ? 0.0
                         : static_cast<double>(per_state_correct[s]) /
                               static_cast<double>(evaluated);
    }
  }
  if (!clean_traces.empty()) {
    report.clean_entropy_profile = entropy_profile(clean_traces);
  }

  // Ready-made PGD.
  AttackSpec readymade = cfg.attack_base;
  readymade.kind = AttackKind::kReadymadePgd;
  readymade.unroll_steps = std::min<std::size_t>(5, n_states);
  readymade.damping = 1.0;
  const AttackResult rm_attack =
      pgd_attack(model, test, domain, readymade, cfg.solver, prediction_state);
  report.readymade_pgd_accuracy = rm_attack.accuracy;
  report.failed_solves += rm_attack.failed_solves;

  // Per-state robust accuracy over the ready-made adversarial inputs.
  {
    std::vector<std::size_t> per_state_correct(n_states + 1, 0);
    std::size_t evaluated = 0;
    std::vector<DynamicsTrace> rm_traces;
    for (std::size_t j = 0; j < test.size(); ++j) {
      try {
        DynamicsTrace t = solve(model, rm_attack.adversarial[j], cfg.solver);
        ++evaluated;
        for (std::size_t s = 1; s <= n_states; ++s) {
          if (argmax(t.logits[s]) ==
              static_cast<std::size_t>(test.labels[j])) {
            ++per_state_correct[s];
          }
        }
        rm_traces.push_back(std::move(t));
      } catch (const DivergenceError&) {
      }
    }
    report.per_state_robust_accuracy.assign(n_states + 1, 0.0);
    for (std::size_t s = 1; s <= n_states; ++s) {
      report.per_state_robust_accuracy[s] =
          evaluated == 0 ? 0.0
                         : static_cast<double>(per_state_correct[s]) /
                               static_cast<double>(evaluated);
    }
    if (!rm_traces.empty()) {
      report.readymade_entropy_profile = entropy_profile(rm_traces);
    }
  }

  // The attack grid.
  const GridResult grid = run_attack_grid(model, test, domain, cfg.attack_base,
                                          cfg.solver, prediction_state);
  report.grid_min_accuracy = grid.min_accuracy;
  report.grid_argmin = grid.argmin;
  report.grid_cells.reserve(grid.cells.size());
  for (const AttackResult& cell : grid.cells) {
    report.grid_cells.push_back({cell.spec.state_index, cell.spec.unroll_steps,
                                 cell.spec.damping, cell.accuracy});
    report.failed_solves += cell.failed_solves;
  }

  // P / dH at the equilibrium (or early) state: headline numbers under the
  // strongest attack, plus the spread over the whole grid.
  {
    std::vector<double> grid_P;
    std::vector<double> grid_dH;
    grid_P.reserve(grid.cells.size());
    grid_dH.reserve(grid.cells.size());
    for (const AttackResult& cell : grid.cells) {
      const EntropyPair pair = paired_entropies(
          model, test.inputs, cell.adversarial, cfg.solver, entropy_state);
      if (pair.clean.empty()) continue;
      grid_P.push_back(metric_P(pair.clean, pair.adv));
      grid_dH.push_back(metric_dH(pair.clean, pair.adv));
      if (cell.spec.state_index == grid.argmin.state_index &&
          cell.spec.unroll_steps == grid.argmin.unroll_steps &&
          cell.spec.damping == grid.argmin.damping) {
        report.P = grid_P.back();
        report.delta_H = grid_dH.back();
      }
    }
    if (!grid_P.empty()) {
      report.P_over_grid = {exact_mean(grid_P),
                            *std::min_element(grid_P.begin(), grid_P.end()),
                            *std::max_element(grid_P.begin(), grid_P.end())};
      report.dH_over_grid = {exact_mean(grid_dH),
                             *std::min_element(grid_dH.begin(), grid_dH.end()),
                             *std::max_element(grid_dH.begin(), grid_dH.end())};
    }
  }

  // Entropy profile and dynamics deviation under the strongest grid attack.
  {
    const AttackResult* argmin_cell = nullptr;
    for (const AttackResult& cell : grid.cells) {
      if (cell.spec.state_index == grid.argmin.state_index &&
          cell.spec.unroll_steps == grid.argmin.unroll_steps &&
          cell.spec.damping == grid.argmin.damping) {
        argmin_cell = &cell;
        break;
      }
    }
    if (argmin_cell != nullptr && !clean_ok.empty()) {
      std::vector<DynamicsTrace> adv_traces;
      std::vector<std::vector<double>> deviations;
      for (std::size_t idx = 0; idx < clean_ok.size(); ++idx) {
        const std::size_t j = clean_ok[idx];
        try {
          DynamicsTrace at =
              solve(model, argmin_cell->adversarial[j], cfg.solver);
          deviations.push_back(dynamics_deviation(clean_traces[idx], at));
          adv_traces.push_back(std::move(at));
        } catch (const DivergenceError&) {
        }
      }
      if (!adv_traces.empty()) {
        report.grid_argmin_entropy_profile = entropy_profile(adv_traces);
        report.deviation_profile.assign(n_states + 1, 0.0);
        std::vector<double> column(deviations.size());
        for (std::size_t t = 0; t <= n_states; ++t) {
          for (std::size_t j = 0; j < deviations.size(); ++j) {
            column[j] = deviations[j][t];
          }
          report.deviation_profile[t] = exact_mean(column);
        }
      }
    }
  }

  // Defended evaluation: clean, ready-made, and grid accuracy with the
  // entropy-reduction defense active, plus the entropy effect at z^[N] under
  // the strongest attack.
  report.defense.enabled = cfg.defense.enabled;
  if (cfg.defense.enabled) {
    std::size_t failed = 0;
    report.defense.clean_accuracy =
        defended_accuracy(model, test.inputs, test.labels, cfg.solver,
                          cfg.defense, domain, prediction_state, &failed);
    report.defense.failed_solves += failed;
    report.defense.readymade_accuracy =
        defended_accuracy(model, rm_attack.adversarial, test.labels, cfg.solver,
                          cfg.defense, domain, prediction_state, &failed);
    report.defense.failed_solves += failed;

    double defended_min = 1.0;
    bool first = true;
    for (const AttackResult& cell : grid.cells) {
      const double acc =
          defended_accuracy(model, cell.adversarial, test.labels, cfg.solver,
                            cfg.defense, domain, prediction_state, &failed);
      report.defense.failed_solves += failed;
      if (first || acc < defended_min) {
        defended_min = acc;
        first = false;
      }
    }
    report.defense.grid_min_accuracy = defended_min;

    // Entropy at the final state under the strongest attack, with and
    // without the defense.
    const AttackResult* argmin_cell = nullptr;
    for (const AttackResult& cell : grid.cells) {
      if (cell.spec.state_index == grid.argmin.state_index &&
          cell.spec.unroll_steps == grid.argmin.unroll_steps &&
          cell.spec.damping == grid.argmin.damping) {
        argmin_cell = &cell;
        break;
      }
    }
    if (argmin_cell != nullptr) {
      std::vector<double> undefended;
      std::vector<double> defended;
      for (std::size_t j = 0; j < argmin_cell->adversarial.size(); ++j) {
        try {
          const DynamicsTrace plain =
              solve(model, argmin_cell->adversarial[j], cfg.solver);
          const DefenseTrace guarded = entropy_reduction_solve(
              model, argmin_cell->adversarial[j], cfg.solver, cfg.defense,
              domain);
          undefended.push_back(plain.entropies[n_states]);
          defended.push_back(guarded.trace.entropies[n_states]);
        } catch (const DivergenceError&) {
        }
      }
      if (!undefended.empty()) {
        report.defense.mean_entropy_undefended = exact_mean(undefended);
        report.defense.mean_entropy_defended = exact_mean(defended);
      }
    }
  }

  return report;
}

}  // namespace deqr
