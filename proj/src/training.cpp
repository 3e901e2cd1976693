#include "deqr/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deqr/errors.hpp"
#include "deqr/unroll.hpp"

namespace deqr {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ContractError("TrainConfig: lr0 must be > 0");
  if (batch_size < 1) throw ContractError("TrainConfig: batch_size must be >= 1");
  if (framework == Framework::kTrades && !(trades_weight > 0.0)) {
    throw ContractError("TrainConfig: trades_weight must be > 0 for TRADES");
  }
  if (phantom_steps < 1) {
    throw ContractError("TrainConfig: phantom_steps must be >= 1");
  }
  if (epsilon < 0.0) throw ContractError("TrainConfig: epsilon must be >= 0");
}

OptimizerState OptimizerState::init(const DeqModel& model) {
  OptimizerState s;
  s.m_w = Tensor::zeros(model.W.shape());
  s.v_w = Tensor::zeros(model.W.shape());
  s.m_u = Tensor::zeros(model.U.shape());
  s.v_u = Tensor::zeros(model.U.shape());
  s.m_b = Tensor::zeros(model.b.shape());
  s.v_b = Tensor::zeros(model.b.shape());
  s.m_v = Tensor::zeros(model.V.shape());
  s.v_v = Tensor::zeros(model.V.shape());
  s.m_c = Tensor::zeros(model.c.shape());
  s.v_c = Tensor::zeros(model.c.shape());
  return s;
}

ParamGrads ParamGrads::zeros(const DeqModel& model) {
  return {Tensor::zeros(model.W.shape()), Tensor::zeros(model.U.shape()),
          Tensor::zeros(model.b.shape()), Tensor::zeros(model.V.shape()),
          Tensor::zeros(model.c.shape())};
}

void ParamGrads::add_scaled(const ParamGrads& other, double factor) {
  auto axpy = [factor](Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += factor * src[i];
  };
  axpy(W, other.W);
  axpy(U, other.U);
  axpy(b, other.b);
  axpy(V, other.V);
  axpy(c, other.c);
}

namespace {

void adam_update_one(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
                     std::size_t step, double lr, double beta1, double beta2,
                     double eps_adam, const char* name) {
  if (!all_finite(grad)) {
    throw NumericError(std::string("adam_update: non-finite gradient for ") +
                       name);
  }
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps_adam);
  }
}

}  // namespace

void adam_update(DeqModel& model, const ParamGrads& grads, OptimizerState& opt,
                 double lr, double beta1, double beta2, double eps_adam) {
  ++opt.step;
  adam_update_one(model.W, grads.W, opt.m_w, opt.v_w, opt.step, lr, beta1,
                  beta2, eps_adam, "W");
  adam_update_one(model.U, grads.U, opt.m_u, opt.v_u, opt.step, lr, beta1,
                  beta2, eps_adam, "U");
  adam_update_one(model.b, grads.b, opt.m_b, opt.v_b, opt.step, lr, beta1,
                  beta2, eps_adam, "b");
  adam_update_one(model.V, grads.V, opt.m_v, opt.v_v, opt.step, lr, beta1,
                  beta2, eps_adam, "V");
  adam_update_one(model.c, grads.c, opt.m_c, opt.v_c, opt.step, lr, beta1,
                  beta2, eps_adam, "c");
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const double frac =
      static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * lr0 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

std::size_t sample_intermediate_state(Rng& rng, std::size_t iterations) {
  if (iterations < 1) {
    throw ContractError("sample_intermediate_state: iterations must be >= 1");
  }
  return 1 + rng.uniform_index(iterations);
}

namespace {

AttackSpec inner_attack_spec(const TrainConfig& cfg, const SolverConfig& solver,
                             AttackKind kind, std::uint64_t seed) {
  AttackSpec spec;
  spec.kind = kind;
  spec.unroll_steps = std::min(cfg.phantom_steps, solver.iterations);
  spec.damping = 1.0;
  spec.steps = cfg.attack_steps;
  spec.step_size = cfg.alpha;
  spec.budget = cfg.epsilon;
  spec.random_start = true;
  spec.seed = seed;
  return spec;
}

// Endpoint logits of the phantom tail: unroll_steps plain applications from
// trace.states[loss_state], then the head.
Tensor tail_logits(const DeqModel& model, const DynamicsTrace& trace,
                   const Tensor& x, std::size_t loss_state,
                   std::size_t unroll_steps) {
  Tensor z = trace.states[loss_state];
  for (std::size_t k = 0; k < unroll_steps; ++k) z = layer_apply(model, z, x);
  return head_apply(model, z);
}

double kl_divergence(const Tensor& logits_a, const Tensor& logits_b) {
  const Tensor pa = softmax(logits_a);
  const Tensor la = log_softmax(logits_a);
  const Tensor lb = log_softmax(logits_b);
  double kl = 0.0;
  for (std::size_t i = 0; i < pa.numel(); ++i) kl += pa[i] * (la[i] - lb[i]);
  return kl;
}

struct StepOutcome {
  ParamGrads grads;
  double loss = 0.0;
};

StepOutcome pgd_at_grads(const DeqModel& model, const LabeledBatch& adv,
                         const TrainConfig& cfg, const SolverConfig& solver,
                         std::size_t loss_state) {
  StepOutcome out{ParamGrads::zeros(model), 0.0};
  const double w = 1.0 / static_cast<double>(adv.size());
  for (std::size_t j = 0; j < adv.size(); ++j) {
    const DynamicsTrace trace = solve(model, adv.inputs[j], solver);
    const PhantomGrad pg = phantom_grad(model, trace, adv.inputs[j], loss_state,
                                        adv.labels[j], cfg.phantom_steps);
    out.grads.add_scaled({pg.w_grad, pg.u_grad, pg.b_grad, pg.v_grad,
                          pg.c_grad},
                         w);
    out.loss += w * pg.loss;
  }
  return out;
}

StepOutcome trades_grads(const DeqModel& model, const LabeledBatch& clean,
                         const LabeledBatch& adv, const TrainConfig& cfg,
                         const SolverConfig& solver, std::size_t loss_state) {
  StepOutcome out{ParamGrads::zeros(model), 0.0};
  const double w = 1.0 / static_cast<double>(clean.size());
  for (std::size_t j = 0; j < clean.size(); ++j) {
    const DynamicsTrace clean_trace = solve(model, clean.inputs[j], solver);

    ExprGraph g;
    const ModelNodes m = add_model_leaves(g, model);
    const NodeId x_clean = g.constant(clean.inputs[j]);
    const NodeId clean_anchor = g.constant(clean_trace.states[loss_state]);
    const NodeId z_clean = unroll_dynamics(g, m, model.sigma, clean_anchor,
                                           x_clean, cfg.phantom_steps, 1.0);
    const NodeId clean_logits = head_node(g, m, z_clean);
    NodeId loss = cross_entropy_of_logits(g, clean_logits, clean.labels[j]);

    if (cfg.trades_weight > 0.0) {
      const DynamicsTrace adv_trace = solve(model, adv.inputs[j], solver);
      const NodeId x_adv = g.constant(adv.inputs[j]);
      const NodeId adv_anchor = g.constant(adv_trace.states[loss_state]);
      const NodeId z_adv = unroll_dynamics(g, m, model.sigma, adv_anchor,
                                           x_adv, cfg.phantom_steps, 1.0);
      const NodeId adv_logits = head_node(g, m, z_adv);
      const NodeId kl = kl_between(g, adv_logits, clean_logits);
      loss = g.add(loss, g.scale(kl, cfg.trades_weight));
    }

    const GradResult res = reverse_grad(g, loss);
    out.grads.add_scaled({res.grad(m.W), res.grad(m.U), res.grad(m.b),
                          res.grad(m.V), res.grad(m.c)},
                         w);
    out.loss += w * res.value.scalar_value();
  }
  return out;
}

void apply_update(DeqModel& model, OptimizerState& opt, const StepOutcome& out,
                  const TrainConfig& cfg, double lr) {
  if (!std::isfinite(out.loss)) {
    throw NumericError("training step: non-finite batch loss " +
                       std::to_string(out.loss));
  }
  adam_update(model, out.grads, opt, lr, cfg.beta1, cfg.beta2, cfg.eps_adam);
  if (cfg.rescale_each_step) model = spectral_rescale(model);
}

}  // namespace

double batch_loss_at_state(const DeqModel& model, const LabeledBatch& clean,
                           const LabeledBatch& adversarial,
                           const TrainConfig& cfg, const SolverConfig& solver,
                           std::size_t loss_state) {
  double loss = 0.0;
  const double w = 1.0 / static_cast<double>(clean.size());
  for (std::size_t j = 0; j < clean.size(); ++j) {
    if (cfg.framework == Framework::kPgdAt) {
      const DynamicsTrace trace = solve(model, adversarial.inputs[j], solver);
      const Tensor logits = tail_logits(model, trace, adversarial.inputs[j],
                                        loss_state, cfg.phantom_steps);
      loss += w * cross_entropy(logits, clean.labels[j]);
    } else {
      const DynamicsTrace clean_trace = solve(model, clean.inputs[j], solver);
      const Tensor clean_logits = tail_logits(
          model, clean_trace, clean.inputs[j], loss_state, cfg.phantom_steps);
      const DynamicsTrace adv_trace =
          solve(model, adversarial.inputs[j], solver);
      const Tensor adv_logits = tail_logits(
          model, adv_trace, adversarial.inputs[j], loss_state, cfg.phantom_steps);
      loss += w * (cross_entropy(clean_logits, clean.labels[j]) +
                   cfg.trades_weight * kl_divergence(adv_logits, clean_logits));
    }
  }
  return loss;
}

double pgd_at_step(DeqModel& model, OptimizerState& opt,
                   const LabeledBatch& batch, const DomainBox& domain,
                   const TrainConfig& cfg, const SolverConfig& solver,
                   double lr, Rng& rng) {
  if (cfg.framework != Framework::kPgdAt) {
    throw ContractError("pgd_at_step: framework must be pgd_at");
  }
  const AttackSpec spec =
      inner_attack_spec(cfg, solver, AttackKind::kReadymadePgd, rng.next_u64());
  const AttackResult attack =
      pgd_attack(model, batch, domain, spec, solver, solver.iterations);
  const std::size_t loss_state =
      cfg.random_intermediate ? sample_intermediate_state(rng, solver.iterations)
                              : solver.iterations;
  LabeledBatch adv{attack.adversarial, batch.labels};
  const StepOutcome out = pgd_at_grads(model, adv, cfg, solver, loss_state);
  apply_update(model, opt, out, cfg, lr);
  return out.loss;
}

double trades_step(DeqModel& model, OptimizerState& opt,
                   const LabeledBatch& batch, const DomainBox& domain,
                   const TrainConfig& cfg, const SolverConfig& solver,
                   double lr, Rng& rng) {
  if (cfg.framework != Framework::kTrades) {
    throw ContractError("trades_step: framework must be trades");
  }
  const AttackSpec spec =
      inner_attack_spec(cfg, solver, AttackKind::kTradesKlPgd, rng.next_u64());
  const AttackResult attack =
      trades_inner_max(model, batch, domain, spec, solver, solver.iterations);
  const std::size_t loss_state =
      cfg.random_intermediate ? sample_intermediate_state(rng, solver.iterations)
                              : solver.iterations;
  LabeledBatch adv{attack.adversarial, batch.labels};
  const StepOutcome out = trades_grads(model, batch, adv, cfg, solver, loss_state);
  apply_update(model, opt, out, cfg, lr);
  return out.loss;
}

TrainResult train_loop(const TrainData& data, std::size_t state_dim,
                       Nonlinearity sigma, double gamma, const TrainConfig& cfg,
                       const SolverConfig& solver,
                       const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  solver.validate();
  if (data.train.size() == 0) {
    throw ContractError("train_loop: empty training split");
  }

  Rng rng(cfg.seed);
  const std::size_t input_dim = data.train.inputs.front().numel();
  const std::size_t num_classes =
      1 + static_cast<std::size_t>(
              *std::max_element(data.train.labels.begin(),
                                data.train.labels.end()));
  DeqModel model =
      random_model(input_dim, state_dim, num_classes, sigma, gamma, rng);
  OptimizerState opt = OptimizerState::init(model);

  TrainResult result;
  result.model = model;
  result.best_robust_accuracy = -1.0;

  const std::size_t n = data.train.size();
  const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;

  // Validation attack: ready-made PGD at the final state, fixed seed so the
  // per-epoch curve is comparable.
  AttackSpec eval_spec = inner_attack_spec(
      cfg, solver, AttackKind::kReadymadePgd, cfg.seed ^ 0x9e3779b97f4a7c15ull);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    double last_lr = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      LabeledBatch batch;
      batch.inputs.reserve(stop - start);
      batch.labels.reserve(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        batch.inputs.push_back(data.train.inputs[order[k]]);
        batch.labels.push_back(data.train.labels[order[k]]);
      }
      const double lr = cosine_lr(global_step, total_steps, cfg.lr0);
      last_lr = lr;
      ++global_step;
      const double loss =
          cfg.framework == Framework::kPgdAt
              ? pgd_at_step(model, opt, batch, data.domain, cfg, solver, lr, rng)
              : trades_step(model, opt, batch, data.domain, cfg, solver, lr, rng);
      epoch_loss += loss * static_cast<double>(stop - start);
    }
    epoch_loss /= static_cast<double>(n);

    EpochRecord record;
    record.epoch = epoch;
    record.lr = last_lr;
    record.train_loss = epoch_loss;
    record.clean_accuracy =
        evaluate_accuracy(model, data.validation.inputs, data.validation.labels,
                          solver, solver.iterations);
    record.robust_accuracy =
        pgd_attack(model, data.validation, data.domain, eval_spec, solver,
                   solver.iterations)
            .accuracy;
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);

    if (record.robust_accuracy > result.best_robust_accuracy) {
      result.best_robust_accuracy = record.robust_accuracy;
      result.best_epoch = epoch;
      result.model = model;
    }
  }

  if (result.history.empty()) {
    result.model = model;
    result.best_robust_accuracy = 0.0;
  }
  return result;
}

}  // namespace deqr
