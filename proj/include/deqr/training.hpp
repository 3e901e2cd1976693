#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "deqr/attacks.hpp"
#include "deqr/data.hpp"
#include "deqr/model.hpp"
#include "deqr/rng.hpp"
#include "deqr/solver.hpp"

namespace deqr {

enum class Framework : std::uint8_t { kPgdAt = 0, kTrades = 1 };

struct TrainConfig {
  Framework framework = Framework::kPgdAt;
  bool random_intermediate = false;  // loss at a random state z^[i]
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr0 = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  double epsilon = 8.0 / 255.0;  // inner-maximization budget
  double alpha = 2.0 / 255.0;    // inner-maximization step size
  std::size_t attack_steps = 10;
  double trades_weight = 6.0;
  std::size_t phantom_steps = 5;  // K_p
  std::uint64_t seed = 0;
  bool rescale_each_step = true;

  void validate() const;
};

struct OptimizerState {
  Tensor m_w, v_w, m_u, v_u, m_b, v_b, m_v, v_v, m_c, v_c;
  std::size_t step = 0;

  static OptimizerState init(const DeqModel& model);
};

struct ParamGrads {
  Tensor W, U, b, V, c;

  static ParamGrads zeros(const DeqModel& model);
  void add_scaled(const ParamGrads& other, double factor);
};

// Standard bias-corrected Adam; throws NumericError naming the parameter when
// a gradient is non-finite.
void adam_update(DeqModel& model, const ParamGrads& grads, OptimizerState& opt,
                 double lr, double beta1, double beta2, double eps_adam);

// 0.5 * lr0 * (1 + cos(pi * step / total)), clamped to 0 past the end.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

// Uniform draw from {1, ..., iterations}, one per batch.
std::size_t sample_intermediate_state(Rng& rng, std::size_t iterations);

// Framework loss of a batch at a fixed anchor state, no parameter update.
double batch_loss_at_state(const DeqModel& model, const LabeledBatch& clean,
                           const LabeledBatch& adversarial,
                           const TrainConfig& cfg, const SolverConfig& solver,
                           std::size_t loss_state);

// One optimizer step; returns the batch loss. `rng` drives the inner attack
// seed and, when enabled, the random intermediate state.
double pgd_at_step(DeqModel& model, OptimizerState& opt,
                   const LabeledBatch& batch, const DomainBox& domain,
                   const TrainConfig& cfg, const SolverConfig& solver,
                   double lr, Rng& rng);
double trades_step(DeqModel& model, OptimizerState& opt,
                   const LabeledBatch& batch, const DomainBox& domain,
                   const TrainConfig& cfg, const SolverConfig& solver,
                   double lr, Rng& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
};

struct TrainResult {
  DeqModel model;  // checkpoint with the best validation robust accuracy
  std::vector<EpochRecord> history;
  double best_robust_accuracy = 0.0;
  std::size_t best_epoch = 0;
};

struct TrainData {
  LabeledBatch train;
  LabeledBatch validation;
  DomainBox domain;
};

// Full loop: per-epoch validation with clean accuracy and ready-made PGD
// robust accuracy at the final state; returns the best checkpoint. `on_epoch`
// (optional) fires after each epoch so callers can flush history to disk.
TrainResult train_loop(const TrainData& data, std::size_t state_dim,
                       Nonlinearity sigma, double gamma, const TrainConfig& cfg,
                       const SolverConfig& solver,
                       const std::function<void(const EpochRecord&)>& on_epoch =
                           nullptr);

}  // namespace deqr
