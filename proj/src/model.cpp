#include "deqr/model.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "deqr/errors.hpp"

namespace deqr {

void DeqModel::validate() const {
  const std::size_t d = state_dim();
  if (!W.is_matrix() || W.rows() != d || W.cols() != d) {
    throw DimensionError("DeqModel: W must be d x d");
  }
  if (!U.is_matrix() || U.rows() != d) {
    throw DimensionError("DeqModel: U must be d x l");
  }
  if (!V.is_matrix() || V.cols() != d || V.rows() != c.numel()) {
    throw DimensionError("DeqModel: V must be C x d");
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw ContractError("DeqModel: gamma must lie in (0, 1]");
  }
  for (const Tensor* t : {&W, &U, &b, &V, &c}) {
    if (!all_finite(*t)) throw NumericError("DeqModel: non-finite parameter");
  }
}

DeqModel random_model(std::size_t input_dim, std::size_t state_dim,
                      std::size_t num_classes, Nonlinearity sigma,
                      double gamma, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(state_dim));
  auto fill = [&](Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      t[i] = rng.uniform(-bound, bound);
    }
  };
  DeqModel model;
  model.W = Tensor::zeros({state_dim, state_dim});
  model.U = Tensor::zeros({state_dim, input_dim});
  model.b = Tensor::zeros({state_dim});
  model.V = Tensor::zeros({num_classes, state_dim});
  model.c = Tensor::zeros({num_classes});
  model.sigma = sigma;
  model.gamma = gamma;
  fill(model.W);
  fill(model.U);
  fill(model.b);
  fill(model.V);
  fill(model.c);
  return spectral_rescale(model);
}

Tensor layer_apply(const DeqModel& model, const Tensor& z, const Tensor& x) {
  if (z.numel() != model.state_dim()) {
    throw DimensionError("layer_apply: z has " + std::to_string(z.numel()) +
                         " entries, state dim is " +
                         std::to_string(model.state_dim()));
  }
  if (x.numel() != model.input_dim()) {
    throw DimensionError("layer_apply: x has " + std::to_string(x.numel()) +
                         " entries, input dim is " +
                         std::to_string(model.input_dim()));
  }
  const Tensor wz = matvec(model.W, z);
  const Tensor ux = matvec(model.U, x);
  Tensor pre = Tensor::zeros({model.state_dim()});
  for (std::size_t i = 0; i < pre.numel(); ++i) {
    pre[i] = (wz[i] + ux[i]) + model.b[i];
  }
  if (!all_finite(pre)) throw NumericError("layer_apply: non-finite state");
  switch (model.sigma) {
    case Nonlinearity::kTanh:
      for (std::size_t i = 0; i < pre.numel(); ++i) pre[i] = std::tanh(pre[i]);
      break;
    case Nonlinearity::kRelu:
      for (std::size_t i = 0; i < pre.numel(); ++i) {
        pre[i] = pre[i] > 0.0 ? pre[i] : 0.0;
      }
      break;
    case Nonlinearity::kIdentity:
      break;
  }
  return pre;
}

Tensor head_apply(const DeqModel& model, const Tensor& z) {
  if (z.numel() != model.state_dim()) {
    throw DimensionError("head_apply: z has " + std::to_string(z.numel()) +
                         " entries, state dim is " +
                         std::to_string(model.state_dim()));
  }
  return affine(model.V, z, model.c);
}

RelError rel_error(const DeqModel& model, const Tensor& z, const Tensor& x) {
  const Tensor fz = layer_apply(model, z, x);
  const double denom = norm2(fz);
  const double resid = norm2(sub(fz, z));
  if (denom < 1e-12) return {resid, true};
  return {resid / denom, false};
}

double spectral_norm(const Tensor& m, std::size_t iterations, double tol) {
  if (!m.is_matrix()) throw DimensionError("spectral_norm: not a matrix");
  const std::size_t n = m.cols();
  // Deterministic start: normalized ones.
  Tensor v = Tensor::full({n}, 1.0 / std::sqrt(static_cast<double>(n)));
  double estimate = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    // w = M v; u = M^T w
    Tensor w = matvec(m, v);
    const double wn = norm2(w);
    if (wn == 0.0) return 0.0;
    Tensor u = Tensor::zeros({n});
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t cidx = 0; cidx < n; ++cidx) {
        u[cidx] += m(r, cidx) * w[r];
      }
    }
    const double un = norm2(u);
    if (un == 0.0) return wn;
    for (std::size_t i = 0; i < n; ++i) v[i] = u[i] / un;
    const double next = std::sqrt(un);  // |M^T M v| with |v| = 1
    if (std::abs(next - estimate) <= tol * std::max(1.0, next)) {
      return next;
    }
    estimate = next;
  }
  return estimate;
}

DeqModel spectral_rescale(const DeqModel& model) {
  const double s = spectral_norm(model.W);
  if (s <= model.gamma) return model;
  DeqModel scaled = model;
  scaled.W = scale(model.W, model.gamma / s);
  return scaled;
}

std::uint64_t param_checksum(const DeqModel& model) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const Tensor& t) {
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      for (int byte = 0; byte < 8; ++byte) {
        h ^= (bits >> (8 * byte)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  };
  mix(model.W);
  mix(model.U);
  mix(model.b);
  mix(model.V);
  mix(model.c);
  return h;
}

}  // namespace deqr
