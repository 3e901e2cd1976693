#pragma once

#include <cstdint>

#include "deqr/rng.hpp"
#include "deqr/tensor.hpp"

namespace deqr {

enum class Nonlinearity : std::uint8_t {
  kTanh = 0,
  kRelu = 1,
  kIdentity = 2,  // linear test mode
};

// Weight-tied input-injected layer sigma(W z + U x + b) with an affine
// classification head V z + c.
struct DeqModel {
  Tensor W;  // d x d, recurrent
  Tensor U;  // d x l, input injection
  Tensor b;  // d
  Nonlinearity sigma = Nonlinearity::kTanh;
  Tensor V;  // C x d, head
  Tensor c;  // C
  double gamma = 0.9;  // target spectral bound on W

  std::size_t state_dim() const { return b.numel(); }
  std::size_t input_dim() const { return U.cols(); }
  std::size_t num_classes() const { return c.numel(); }

  void validate() const;
};

// Entries uniform in [-1/sqrt(d), 1/sqrt(d)], then spectrally rescaled.
DeqModel random_model(std::size_t input_dim, std::size_t state_dim,
                      std::size_t num_classes, Nonlinearity sigma,
                      double gamma, Rng& rng);

Tensor layer_apply(const DeqModel& model, const Tensor& z, const Tensor& x);
Tensor head_apply(const DeqModel& model, const Tensor& z);

struct RelError {
  double value = 0.0;
  // True when |f(z; x)| fell below threshold and the absolute residual was
  // returned instead of the quotient.
  bool absolute_fallback = false;
};

// |f(z; x) - z|_2 / |f(z; x)|_2
RelError rel_error(const DeqModel& model, const Tensor& z, const Tensor& x);

// Largest singular value by power iteration on M^T M.
double spectral_norm(const Tensor& m, std::size_t iterations = 100,
                     double tol = 1e-10);

// Scales W down to spectral norm gamma when it exceeds gamma; otherwise
// returns the model unchanged.
DeqModel spectral_rescale(const DeqModel& model);

// Bitwise digest of all parameter tensors (FNV-1a over the raw doubles).
std::uint64_t param_checksum(const DeqModel& model);

}  // namespace deqr
