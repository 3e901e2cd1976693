#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "deqr/expr.hpp"
#include "deqr/model.hpp"
#include "deqr/rng.hpp"
#include "deqr/tensor.hpp"

namespace deqr::testing {

// Mixed absolute/relative error used by every gradient check.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline double max_rel_err(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, rel_err(a[i], b[i]));
  }
  return worst;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (std::memcmp(&a.raw()[i], &b.raw()[i], sizeof(double)) != 0) return false;
  }
  return true;
}

// Dense solve of A y = rhs by Gaussian elimination with partial pivoting.
// Test-side oracle for the direct equilibrium (I - W)^-1 (U x + b); kept
// independent of the solver implementations it checks.
inline Tensor solve_dense(const Tensor& A, const Tensor& rhs) {
  const std::size_t n = rhs.numel();
  std::vector<std::vector<double>> m(n, std::vector<double>(n + 1));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) m[r][c] = A(r, c);
    m[r][n] = rhs[r];
  }
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
    }
    std::swap(m[col], m[pivot]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = m[r][col] / m[col][col];
      for (std::size_t c = col; c <= n; ++c) m[r][c] -= f * m[col][c];
    }
  }
  Tensor y = Tensor::zeros({n});
  for (std::size_t col = n; col > 0; --col) {
    const std::size_t i = col - 1;
    double acc = m[i][n];
    for (std::size_t c = i + 1; c < n; ++c) acc -= m[i][c] * y[c];
    y[i] = acc / m[i][i];
  }
  return y;
}

// Direct equilibrium of the linear test mode: z* = (I - W)^-1 (U x + b).
inline Tensor direct_linear_equilibrium(const DeqModel& model, const Tensor& x) {
  const std::size_t d = model.state_dim();
  Tensor A = Tensor::zeros({d, d});
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      A(r, c) = (r == c ? 1.0 : 0.0) - model.W(r, c);
    }
  }
  return solve_dense(A, affine(model.U, x, model.b));
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng,
                            double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// A model in the linear test mode built from explicit matrices.
inline DeqModel linear_model(Tensor W, Tensor U, Tensor b, Tensor V, Tensor c) {
  DeqModel m;
  m.W = std::move(W);
  m.U = std::move(U);
  m.b = std::move(b);
  m.V = std::move(V);
  m.c = std::move(c);
  m.sigma = Nonlinearity::kIdentity;
  m.gamma = 1.0;
  return m;
}

// Scalar one-dimensional linear model f(z; x) = w z + x, head reads z.
inline DeqModel scalar_linear_model(double w) {
  return linear_model(Tensor::matrix(1, 1, {w}), Tensor::matrix(1, 1, {1.0}),
                      Tensor::vector({0.0}), Tensor::matrix(1, 1, {1.0}),
                      Tensor::vector({0.0}));
}

}  // namespace deqr::testing
