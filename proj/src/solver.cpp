#include "deqr/solver.hpp"

#include <cmath>
#include <string>

#include "deqr/errors.hpp"

namespace deqr {

void SolverConfig::validate() const {
  if (iterations < 1) throw ContractError("SolverConfig: iterations must be >= 1");
  if (!(damping > 0.0 && damping <= 1.0)) {
    throw ContractError("SolverConfig: damping must lie in (0, 1]");
  }
  if (anderson_depth < 1) {
    throw ContractError("SolverConfig: anderson_depth must be >= 1");
  }
  if (!(anderson_mix > 0.0 && anderson_mix <= 1.0)) {
    throw ContractError("SolverConfig: anderson_mix must lie in (0, 1]");
  }
  if (tol < 0.0) throw ContractError("SolverConfig: tol must be >= 0");
}

FixedPointStepper::FixedPointStepper(const DeqModel& model,
                                     const SolverConfig& cfg)
    : model_(model), cfg_(cfg) {
  cfg.validate();
  history_.push_back(Tensor::zeros({model.state_dim()}));
}

Tensor FixedPointStepper::propose(const Tensor& x) const {
  if (cfg_.method == SolveMethod::kAnderson) return anderson_propose(x);
  const Tensor& z = history_.back();
  Tensor fz = layer_apply(model_, z, x);
  if (cfg_.damping == 1.0) return fz;
  Tensor next = Tensor::zeros({fz.numel()});
  for (std::size_t i = 0; i < fz.numel(); ++i) {
    next[i] = (1.0 - cfg_.damping) * z[i] + cfg_.damping * fz[i];
  }
  return next;
}

// Anderson acceleration over the committed history. The map values are
// recomputed against the supplied input each call, so the step always targets
// the current fixed-point problem even if the input changed mid-solve.
Tensor FixedPointStepper::anderson_propose(const Tensor& x) const {
  const std::size_t have = history_.size();
  const std::size_t m = std::min(cfg_.anderson_depth, have);
  const std::size_t first = have - m;

  std::vector<Tensor> g(m);
  std::vector<Tensor> r(m);
  for (std::size_t j = 0; j < m; ++j) {
    g[j] = layer_apply(model_, history_[first + j], x);
    r[j] = sub(g[j], history_[first + j]);
  }

  const std::size_t d = model_.state_dim();
  const double mix = cfg_.anderson_mix;
  auto mixed = [&](const std::vector<double>& alpha) {
    Tensor next = Tensor::zeros({d});
    for (std::size_t i = 0; i < d; ++i) {
      double zbar = 0.0;
      double gbar = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        zbar += alpha[j] * history_[first + j][i];
        gbar += alpha[j] * g[j][i];
      }
      next[i] = (1.0 - mix) * zbar + mix * gbar;
    }
    return next;
  };

  std::vector<double> alpha(m, 0.0);
  alpha[m - 1] = 1.0;
  if (m == 1) return mixed(alpha);

  // Minimize |r_last + D gamma| with D columns r_j - r_last, then
  // alpha_j = gamma_j and alpha_last = 1 - sum gamma. Normal equations with
  // partial pivoting; a singular system falls back to the plain step.
  const std::size_t k = m - 1;
  std::vector<Tensor> dcol(k);
  for (std::size_t j = 0; j < k; ++j) dcol[j] = sub(r[j], r[k]);

  std::vector<std::vector<double>> a(k, std::vector<double>(k + 1, 0.0));
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t q = 0; q < k; ++q) a[p][q] = dot(dcol[p], dcol[q]);
    a[p][k] = -dot(dcol[p], r[k]);
  }

  double scale_ref = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    scale_ref = std::max(scale_ref, std::abs(a[p][p]));
  }
  bool singular = scale_ref == 0.0;
  std::vector<double> gamma(k, 0.0);
  if (!singular) {
    for (std::size_t col = 0; col < k && !singular; ++col) {
      std::size_t pivot = col;
      for (std::size_t row = col + 1; row < k; ++row) {
        if (std::abs(a[row][col]) > std::abs(a[pivot][col])) pivot = row;
      }
      if (std::abs(a[pivot][col]) < 1e-12 * scale_ref) {
        singular = true;
        break;
      }
      std::swap(a[col], a[pivot]);
      for (std::size_t row = col + 1; row < k; ++row) {
        const double f = a[row][col] / a[col][col];
        for (std::size_t q = col; q <= k; ++q) a[row][q] -= f * a[col][q];
      }
    }
    if (!singular) {
      for (std::size_t col = k; col > 0; --col) {
        const std::size_t idx = col - 1;
        double acc = a[idx][k];
        for (std::size_t q = idx + 1; q < k; ++q) acc -= a[idx][q] * gamma[q];
        gamma[idx] = acc / a[idx][idx];
        if (!std::isfinite(gamma[idx])) {
          singular = true;
          break;
        }
      }
    }
  }

  if (singular) return mixed(alpha);  // alpha = last-only

  double gsum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    alpha[j] = gamma[j];
    gsum += gamma[j];
  }
  alpha[k] = 1.0 - gsum;
  return mixed(alpha);
}

void FixedPointStepper::accept(Tensor next_state) {
  history_.push_back(std::move(next_state));
}

namespace {

DynamicsTrace run_solver(const DeqModel& model, const Tensor& x,
                         const SolverConfig& cfg) {
  model.validate();
  FixedPointStepper stepper(model, cfg);
  DynamicsTrace trace;
  trace.states.reserve(cfg.iterations + 1);

  auto record = [&](const Tensor& z) {
    trace.states.push_back(z);
    try {
      trace.residuals.push_back(rel_error(model, z, x).value);
      Tensor lg = head_apply(model, z);
      trace.entropies.push_back(pred_entropy(lg));
      trace.logits.push_back(std::move(lg));
    } catch (const NumericError&) {
      const std::size_t t = trace.states.size() - 1;
      throw DivergenceError(t, "solve: non-finite diagnostics at state " +
                                   std::to_string(t));
    }
    trace.inputs_used.push_back(x);
  };

  record(stepper.current());
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    Tensor next;
    try {
      next = stepper.propose(x);
    } catch (const NumericError&) {
      throw DivergenceError(t + 1, "solve: non-finite state at iteration " +
                                       std::to_string(t + 1));
    }
    if (!all_finite(next)) {
      throw DivergenceError(t + 1, "solve: non-finite state at iteration " +
                                       std::to_string(t + 1));
    }
    stepper.accept(std::move(next));
    record(stepper.current());
    if (cfg.tol > 0.0 && trace.residuals.back() <= cfg.tol) {
      // Converged early: pad to full length by repeating this state.
      while (trace.states.size() < cfg.iterations + 1) {
        trace.states.push_back(trace.states.back());
        trace.residuals.push_back(trace.residuals.back());
        trace.logits.push_back(trace.logits.back());
        trace.entropies.push_back(trace.entropies.back());
        trace.inputs_used.push_back(trace.inputs_used.back());
      }
      break;
    }
  }
  return trace;
}

}  // namespace

DynamicsTrace solve_naive(const DeqModel& model, const Tensor& x,
                          const SolverConfig& cfg) {
  if (cfg.method != SolveMethod::kNaive) {
    throw ContractError("solve_naive: cfg.method must be naive");
  }
  return run_solver(model, x, cfg);
}

DynamicsTrace solve_anderson(const DeqModel& model, const Tensor& x,
                             const SolverConfig& cfg) {
  if (cfg.method != SolveMethod::kAnderson) {
    throw ContractError("solve_anderson: cfg.method must be anderson");
  }
  return run_solver(model, x, cfg);
}

DynamicsTrace solve(const DeqModel& model, const Tensor& x,
                    const SolverConfig& cfg) {
  return run_solver(model, x, cfg);
}

}  // namespace deqr
