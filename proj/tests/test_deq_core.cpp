#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "deqr/errors.hpp"
#include "deqr/model.hpp"
#include "deqr/solver.hpp"
#include "deqr/unroll.hpp"
#include "support/test_support.hpp"

using namespace deqr;
using deqr::testing::bitwise_equal;
using deqr::testing::direct_linear_equilibrium;
using deqr::testing::linear_model;
using deqr::testing::max_rel_err;
using deqr::testing::random_tensor;
using deqr::testing::scalar_linear_model;

namespace {

SolverConfig naive_cfg(std::size_t n, double damping = 1.0, double tol = 0.0) {
  SolverConfig cfg;
  cfg.iterations = n;
  cfg.method = SolveMethod::kNaive;
  cfg.damping = damping;
  cfg.tol = tol;
  return cfg;
}

SolverConfig anderson_cfg(std::size_t n, std::size_t depth = 5,
                          double mix = 1.0, double tol = 0.0) {
  SolverConfig cfg;
  cfg.iterations = n;
  cfg.method = SolveMethod::kAnderson;
  cfg.anderson_depth = depth;
  cfg.anderson_mix = mix;
  cfg.tol = tol;
  return cfg;
}

DeqModel random_tanh_model(Rng& rng, std::size_t l = 3, std::size_t d = 6,
                           std::size_t classes = 3, double gamma = 0.9) {
  return random_model(l, d, classes, Nonlinearity::kTanh, gamma, rng);
}

}  // namespace

TEST_CASE("layer_apply: tanh scalar, zero map, linear first step") {
  {
    DeqModel m = linear_model(Tensor::matrix(1, 1, {0.0}),
                              Tensor::matrix(1, 1, {1.0}),
                              Tensor::vector({0.0}), Tensor::matrix(1, 1, {1.0}),
                              Tensor::vector({0.0}));
    m.sigma = Nonlinearity::kTanh;
    const Tensor out = layer_apply(m, Tensor::vector({0.7}), Tensor::vector({0.5}));
    CHECK(out[0] == doctest::Approx(std::tanh(0.5)).epsilon(1e-15));
    CHECK(out[0] == doctest::Approx(0.462117).epsilon(1e-6));
  }
  {
    DeqModel m = linear_model(Tensor::matrix(2, 2, {0, 0, 0, 0}),
                              Tensor::matrix(2, 1, {0, 0}),
                              Tensor::vector({0, 0}),
                              Tensor::matrix(2, 2, {1, 0, 0, 1}),
                              Tensor::vector({0, 0}));
    m.sigma = Nonlinearity::kTanh;
    const Tensor out =
        layer_apply(m, Tensor::vector({1.3, -2.0}), Tensor::vector({4.0}));
    CHECK(out == Tensor::zeros({2}));
  }
  {
    const DeqModel m = scalar_linear_model(0.5);
    const Tensor out = layer_apply(m, Tensor::vector({0.0}), Tensor::vector({1.0}));
    CHECK(out[0] == 1.0);
  }
  {
    const DeqModel m = scalar_linear_model(0.5);
    CHECK_THROWS_AS(layer_apply(m, Tensor::vector({0.0, 1.0}),
                                Tensor::vector({1.0})),
                    DimensionError);
  }
}

TEST_CASE("head_apply: identity, zero state, hand affine") {
  DeqModel m = linear_model(Tensor::matrix(2, 2, {0, 0, 0, 0}),
                            Tensor::matrix(2, 1, {1, 0}),
                            Tensor::vector({0, 0}),
                            Tensor::matrix(2, 2, {1, 0, 0, 1}),
                            Tensor::vector({0, 0}));
  CHECK(head_apply(m, Tensor::vector({2.5, -1.0})) ==
        Tensor::vector({2.5, -1.0}));

  m.c = Tensor::vector({0.3, -0.4});
  CHECK(head_apply(m, Tensor::zeros({2})) == Tensor::vector({0.3, -0.4}));

  DeqModel one = linear_model(Tensor::matrix(2, 2, {0, 0, 0, 0}),
                              Tensor::matrix(2, 1, {1, 0}),
                              Tensor::vector({0, 0}),
                              Tensor::matrix(1, 2, {1, -1}),
                              Tensor::vector({0.5}));
  CHECK(head_apply(one, Tensor::vector({2, 1})) == Tensor::vector({1.5}));
}

TEST_CASE("solve_naive: hand-iterated contraction and fixed points") {
  const DeqModel m = scalar_linear_model(0.5);
  const DynamicsTrace trace =
      solve_naive(m, Tensor::vector({1.0}), naive_cfg(3));
  REQUIRE(trace.states.size() == 4);
  CHECK(trace.states[0][0] == 0.0);
  CHECK(trace.states[1][0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(trace.states[2][0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(trace.states[3][0] == doctest::Approx(1.75).epsilon(1e-15));

  // f(z; x) = z stays at the zero initial state with zero residual.
  const DeqModel id = scalar_linear_model(1.0);
  DeqModel id_zero_input = id;
  id_zero_input.U = Tensor::matrix(1, 1, {0.0});
  const DynamicsTrace fixed =
      solve_naive(id_zero_input, Tensor::vector({1.0}), naive_cfg(5));
  for (const Tensor& z : fixed.states) CHECK(z[0] == 0.0);
  for (double r : fixed.residuals) CHECK(r == 0.0);
}

TEST_CASE("solve_naive with full damping equals nested layer_apply bitwise") {
  Rng rng(31);
  const DeqModel m = random_tanh_model(rng);
  const Tensor x = random_tensor({3}, rng, -1.0, 1.0);
  const DynamicsTrace trace = solve_naive(m, x, naive_cfg(6));
  Tensor z = Tensor::zeros({m.state_dim()});
  for (std::size_t k = 1; k <= 6; ++k) {
    z = layer_apply(m, z, x);
    CHECK(bitwise_equal(trace.states[k], z));
  }
}

TEST_CASE("damped naive iteration mixes states as configured") {
  const DeqModel m = scalar_linear_model(0.5);
  const DynamicsTrace trace =
      solve_naive(m, Tensor::vector({1.0}), naive_cfg(2, 0.5));
  // z1 = 0.5 * f(0) = 0.5; z2 = 0.5 * z1 + 0.5 * (0.5 * z1 + 1) = 0.875
  CHECK(trace.states[1][0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(trace.states[2][0] == doctest::Approx(0.875).epsilon(1e-15));
}

TEST_CASE("trace diagnostics are definitionally consistent") {
  Rng rng(32);
  const DeqModel m = random_tanh_model(rng);
  const Tensor x = random_tensor({3}, rng, -1.0, 1.0);
  const DynamicsTrace trace = solve(m, x, anderson_cfg(8));
  REQUIRE(trace.states.size() == 9);
  REQUIRE(trace.logits.size() == 9);
  REQUIRE(trace.entropies.size() == 9);
  REQUIRE(trace.residuals.size() == 9);
  REQUIRE(trace.inputs_used.size() == 9);
  for (std::size_t t = 0; t < trace.states.size(); ++t) {
    CHECK(bitwise_equal(trace.logits[t], head_apply(m, trace.states[t])));
    CHECK(trace.entropies[t] == pred_entropy(head_apply(m, trace.states[t])));
    CHECK(trace.residuals[t] == rel_error(m, trace.states[t], x).value);
  }
}

TEST_CASE("early stop pads the trace to full length") {
  const DeqModel m = scalar_linear_model(0.5);
  const DynamicsTrace trace =
      solve_naive(m, Tensor::vector({1.0}), naive_cfg(20, 1.0, 1e-4));
  REQUIRE(trace.states.size() == 21);
  // Residual halves per step; 1e-4 is crossed around step 14. Everything
  // after the stopping state repeats it exactly.
  std::size_t stop = 0;
  for (std::size_t t = 1; t < trace.residuals.size(); ++t) {
    if (trace.residuals[t] <= 1e-4) {
      stop = t;
      break;
    }
  }
  REQUIRE(stop > 0);
  REQUIRE(stop < 20);
  for (std::size_t t = stop; t <= 20; ++t) {
    CHECK(bitwise_equal(trace.states[t], trace.states[stop]));
    CHECK(trace.residuals[t] == trace.residuals[stop]);
  }
}

TEST_CASE("solve_anderson: analytic fixed point of the scalar contraction") {
  const DeqModel m = scalar_linear_model(0.5);
  const DynamicsTrace trace =
      solve_anderson(m, Tensor::vector({1.0}), anderson_cfg(8));
  CHECK(std::abs(trace.final_state()[0] - 2.0) <= 1e-8);

  // Identity map: stays at zero.
  DeqModel id = scalar_linear_model(1.0);
  id.U = Tensor::matrix(1, 1, {0.0});
  const DynamicsTrace fixed =
      solve_anderson(id, Tensor::vector({1.0}), anderson_cfg(8));
  CHECK(fixed.final_state()[0] == 0.0);
}

TEST_CASE("anderson depth 1 with mix 1 reproduces the naive equilibrium") {
  Rng rng(33);
  for (int round = 0; round < 10; ++round) {
    Tensor W = random_tensor({4, 4}, rng, -0.4, 0.4);
    const DeqModel m =
        linear_model(W, random_tensor({4, 2}, rng, -1.0, 1.0),
                     random_tensor({4}, rng, -0.5, 0.5),
                     random_tensor({2, 4}, rng, -1.0, 1.0),
                     random_tensor({2}, rng, -0.5, 0.5));
    if (spectral_norm(m.W) >= 0.95) continue;
    const Tensor x = random_tensor({2}, rng, -1.0, 1.0);
    const DynamicsTrace a = solve_anderson(m, x, anderson_cfg(300, 1, 1.0, 1e-10));
    const DynamicsTrace n = solve_naive(m, x, naive_cfg(300, 1.0, 1e-10));
    CHECK(norm2(sub(a.final_state(), n.final_state())) <= 1e-9);
  }
}

TEST_CASE("linear test mode: both solvers match the direct solve") {
  Rng rng(34);
  for (int round = 0; round < 25; ++round) {
    Tensor W = random_tensor({5, 5}, rng, -1.0, 1.0);
    DeqModel m = linear_model(W, random_tensor({5, 3}, rng, -1.0, 1.0),
                              random_tensor({5}, rng, -0.5, 0.5),
                              random_tensor({2, 5}, rng, -1.0, 1.0),
                              random_tensor({2}, rng, -0.5, 0.5));
    m.gamma = 0.9;
    m = spectral_rescale(m);
    const Tensor x = random_tensor({3}, rng, -1.0, 1.0);
    const Tensor direct = direct_linear_equilibrium(m, x);

    const DynamicsTrace naive = solve_naive(m, x, naive_cfg(700, 1.0, 1e-13));
    CHECK(norm2(sub(naive.final_state(), direct)) <= 1e-8);
    const DynamicsTrace anderson = solve_anderson(m, x, anderson_cfg(60, 5, 1.0, 1e-13));
    CHECK(norm2(sub(anderson.final_state(), direct)) <= 1e-8);
  }
}

TEST_CASE("contractive tanh models: residuals shrink and solvers agree") {
  Rng rng(35);
  std::size_t decreasing = 0;
  std::size_t converged = 0;
  const std::size_t rounds = 100;
  for (std::size_t round = 0; round < rounds; ++round) {
    DeqModel m = random_tanh_model(rng, 3, 6, 3, 0.9);
    // random_model rescales only when needed; force the bound check anyway.
    m = spectral_rescale(m);
    const Tensor x = random_tensor({3}, rng, -1.5, 1.5);
    const DynamicsTrace trace = solve_naive(m, x, naive_cfg(50));

    // Strict decrease until the residual reaches the double-precision
    // plateau, where consecutive values tie at ~1e-16.
    bool strict = true;
    for (std::size_t t = 2; t + 1 < trace.residuals.size(); ++t) {
      if (trace.residuals[t] <= 1e-12) break;
      if (!(trace.residuals[t + 1] < trace.residuals[t])) {
        strict = false;
        break;
      }
    }
    if (strict) ++decreasing;
    if (trace.residuals.back() <= 1e-6) ++converged;

    // Anderson (run to tolerance) agrees with naive run to 1e-10.
    const DynamicsTrace deep_naive = solve_naive(m, x, naive_cfg(2000, 1.0, 1e-10));
    const DynamicsTrace anderson = solve_anderson(m, x, anderson_cfg(300, 5, 1.0, 1e-10));
    CHECK(norm2(sub(anderson.final_state(), deep_naive.final_state())) <= 1e-6);
  }
  CHECK(decreasing >= 95);
  CHECK(converged >= 95);
}

TEST_CASE("anderson final residual beats naive statistically") {
  Rng rng(36);
  std::size_t not_worse = 0;
  const std::size_t rounds = 100;
  for (std::size_t round = 0; round < rounds; ++round) {
    DeqModel m = random_tanh_model(rng, 3, 6, 3, 0.9);
    const Tensor x = random_tensor({3}, rng, -1.5, 1.5);
    const double r_naive = solve_naive(m, x, naive_cfg(8)).residuals.back();
    const double r_anderson =
        solve_anderson(m, x, anderson_cfg(8)).residuals.back();
    if (r_anderson <= r_naive * (1.0 + 1e-12)) ++not_worse;
  }
  CHECK(not_worse >= 80);
}

TEST_CASE("rel_error: fixed point, hand arithmetic, absolute fallback") {
  const DeqModel m = scalar_linear_model(0.5);
  // Exact fixed point z* = 2.
  CHECK(rel_error(m, Tensor::vector({2.0}), Tensor::vector({1.0})).value == 0.0);
  // f(1) = 1.5 -> |1.5 - 1| / |1.5| = 1/3.
  const RelError third = rel_error(m, Tensor::vector({1.0}), Tensor::vector({1.0}));
  CHECK(third.value == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_FALSE(third.absolute_fallback);
  // First-step residual from zero state.
  CHECK(rel_error(m, Tensor::vector({0.0}), Tensor::vector({1.0})).value ==
        doctest::Approx(1.0).epsilon(1e-15));
  // f maps to zero: absolute residual flagged.
  DeqModel zero = scalar_linear_model(0.0);
  zero.U = Tensor::matrix(1, 1, {0.0});
  const RelError fallback =
      rel_error(zero, Tensor::vector({0.5}), Tensor::vector({1.0}));
  CHECK(fallback.absolute_fallback);
  CHECK(fallback.value == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("divergence raises with the iteration index") {
  DeqModel wild = scalar_linear_model(1e200);
  wild.gamma = 1.0;  // leave the huge weight in place
  try {
    solve_naive(wild, Tensor::vector({1.0}), naive_cfg(8));
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.iteration() >= 1);
    CHECK(e.iteration() <= 8);
  }
}

TEST_CASE("spectral_rescale: untouched below the bound, exact above") {
  Rng rng(37);
  {
    DeqModel m = linear_model(scale(Tensor::matrix(2, 2, {1, 0, 0, 1}), 0.3),
                              Tensor::matrix(2, 1, {1, 0}),
                              Tensor::vector({0, 0}),
                              Tensor::matrix(2, 2, {1, 0, 0, 1}),
                              Tensor::vector({0, 0}));
    m.gamma = 0.9;
    CHECK(bitwise_equal(spectral_rescale(m).W, m.W));
  }
  {
    DeqModel m = linear_model(scale(Tensor::matrix(2, 2, {1, 0, 0, 1}), 2.0),
                              Tensor::matrix(2, 1, {1, 0}),
                              Tensor::vector({0, 0}),
                              Tensor::matrix(2, 2, {1, 0, 0, 1}),
                              Tensor::vector({0, 0}));
    m.gamma = 0.9;
    const DeqModel scaled = spectral_rescale(m);
    CHECK(scaled.W(0, 0) == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(scaled.W(1, 1) == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(scaled.W(0, 1) == 0.0);
  }
  {
    DeqModel m = linear_model(Tensor::matrix(2, 2, {0, 0, 0, 0}),
                              Tensor::matrix(2, 1, {1, 0}),
                              Tensor::vector({0, 0}),
                              Tensor::matrix(2, 2, {1, 0, 0, 1}),
                              Tensor::vector({0, 0}));
    CHECK(bitwise_equal(spectral_rescale(m).W, m.W));
  }
  // Random matrices: the rescaled spectral norm honors gamma + 1e-6.
  for (int round = 0; round < 20; ++round) {
    DeqModel m = linear_model(random_tensor({6, 6}, rng, -1.0, 1.0),
                              Tensor::matrix(6, 1, std::vector<double>(6, 0.0)),
                              Tensor::zeros({6}),
                              Tensor::matrix(1, 6, std::vector<double>(6, 1.0)),
                              Tensor::zeros({1}));
    m.gamma = 0.9;
    CHECK(spectral_norm(spectral_rescale(m).W) <= 0.9 + 1e-6);
  }
}

TEST_CASE("phantom_grad: finite differences, unreachable parameter, "
          "two-step graph equivalence") {
  Rng rng(38);
  const DeqModel m = random_tanh_model(rng, 3, 5, 3, 0.9);
  const Tensor x = random_tensor({3}, rng, -1.0, 1.0);
  SolverConfig cfg = naive_cfg(6);
  const DynamicsTrace trace = solve(m, x, cfg);

  SUBCASE("matches central finite differences") {
    const PhantomGrad pg = phantom_grad(m, trace, x, 6, 1, 1);
    const Tensor anchor = trace.states[6];
    auto loss_with_W = [&](const Tensor& w_probe) {
      DeqModel probe = m;
      probe.W = w_probe;
      return cross_entropy(
          head_apply(probe, layer_apply(probe, anchor, x)), 1);
    };
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& flat) {
          return loss_with_W(Tensor(m.W.shape(), flat.raw()));
        },
        Tensor::vector(m.W.raw()), 1e-5);
    CHECK(max_rel_err(Tensor::vector(pg.w_grad.raw()), fd) <= 1e-5);
  }

  SUBCASE("gradient of an unreachable head bias is zero") {
    // Loss that reads one logit directly (no softmax coupling): the bias of
    // any other class cannot influence it.
    ExprGraph g;
    const ModelNodes nodes = add_model_leaves(g, m);
    const NodeId xn = g.constant(x);
    const NodeId anchor = g.constant(trace.states[6]);
    const NodeId z = unroll_dynamics(g, nodes, m.sigma, anchor, xn, 1, 1.0);
    const NodeId loss = g.pick(head_node(g, nodes, z), 0);
    const GradResult res = reverse_grad(g, loss);
    CHECK(res.grad(nodes.c)[0] == 1.0);
    CHECK(res.grad(nodes.c)[1] == 0.0);
    CHECK(res.grad(nodes.c)[2] == 0.0);
  }

  SUBCASE("two unroll steps equal two composed layer nodes") {
    const PhantomGrad pg = phantom_grad(m, trace, x, 4, 2, 2);
    ExprGraph g;
    const ModelNodes nodes = add_model_leaves(g, m);
    const NodeId xn = g.leaf(x);
    const NodeId anchor = g.constant(trace.states[4]);
    const NodeId z1 = unroll_dynamics(g, nodes, m.sigma, anchor, xn, 1, 1.0);
    const NodeId z2 = unroll_dynamics(g, nodes, m.sigma, z1, xn, 1, 1.0);
    const NodeId loss = cross_entropy_of_logits(g, head_node(g, nodes, z2), 2);
    const GradResult res = reverse_grad(g, loss);
    CHECK(bitwise_equal(res.grad(nodes.W), pg.w_grad));
    CHECK(bitwise_equal(res.grad(nodes.U), pg.u_grad));
    CHECK(bitwise_equal(res.grad(nodes.b), pg.b_grad));
    CHECK(bitwise_equal(res.grad(nodes.V), pg.v_grad));
    CHECK(bitwise_equal(res.grad(nodes.c), pg.c_grad));
    CHECK(bitwise_equal(res.grad(xn), pg.x_grad));
  }

  SUBCASE("rejects out-of-range anchors") {
    CHECK_THROWS_AS(phantom_grad(m, trace, x, 0, 1, 1), IndexError);
    CHECK_THROWS_AS(phantom_grad(m, trace, x, 7, 1, 1), IndexError);
  }
}
