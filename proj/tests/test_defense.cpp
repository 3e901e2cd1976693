#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cmath>

#include "deqr/dataset.hpp"
#include "deqr/defense.hpp"
#include "deqr/errors.hpp"
#include "deqr/training.hpp"
#include "deqr/unroll.hpp"
#include "support/test_support.hpp"

using namespace deqr;
using deqr::testing::bitwise_equal;
using deqr::testing::max_rel_err;
using deqr::testing::random_tensor;

namespace {

SolverConfig solver8(SolveMethod method = SolveMethod::kNaive) {
  SolverConfig cfg;
  cfg.iterations = 8;
  cfg.method = method;
  return cfg;
}

DeqModel toy_model(std::uint64_t seed, std::size_t l = 2, std::size_t d = 6,
                   std::size_t classes = 3) {
  Rng rng(seed);
  return random_model(l, d, classes, Nonlinearity::kTanh, 0.9, rng);
}

DefenseConfig defense_cfg(double beta, std::size_t r, std::size_t tf,
                          double eps) {
  DefenseConfig cfg;
  cfg.beta = beta;
  cfg.inner_steps = r;
  cfg.frequency = tf;
  cfg.budget = eps;
  cfg.enabled = true;
  return cfg;
}

}  // namespace

TEST_CASE("input_update_step: zero step size and unreachable input") {
  const DeqModel m = toy_model(61);
  const Tensor x = Tensor::vector({0.4, -0.2});
  Rng z_rng(1);
  const Tensor z = random_tensor({6}, z_rng, -0.5, 0.5);
  const DomainBox domain = DomainBox::cube(2, -3.0, 3.0);

  SUBCASE("beta = 0 leaves the input untouched") {
    const InputUpdateResult res =
        input_update_step(m, z, x, x, 0.0, 0.5, domain);
    CHECK(res.gradient_ok);
    CHECK(bitwise_equal(res.x, x));
  }

  SUBCASE("U = 0 gives a zero gradient") {
    DeqModel cut = m;
    cut.U = Tensor::zeros({6, 2});
    const InputUpdateResult res =
        input_update_step(cut, z, x, x, 0.1, 0.5, domain);
    CHECK(res.gradient_ok);
    CHECK(bitwise_equal(res.x, x));
  }

  SUBCASE("gradient matches finite differences of the entropy objective") {
    ExprGraph g;
    const ModelNodes nodes = add_model_constants(g, m);
    const NodeId xn = g.leaf(x);
    const NodeId z_plus =
        unroll_dynamics(g, nodes, m.sigma, g.constant(z), xn, 1, 1.0);
    const NodeId entropy = entropy_of_logits(g, head_node(g, nodes, z_plus));
    const Tensor grad = reverse_grad(g, entropy).grad(xn);
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          return pred_entropy(head_apply(m, layer_apply(m, z, probe)));
        },
        x, 1e-5);
    CHECK(max_rel_err(grad, fd) <= 1e-5);

    // And the update step applies exactly -beta * grad before projection.
    const double beta = 0.05;
    const InputUpdateResult res =
        input_update_step(m, z, x, x, beta, 10.0, domain);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      CHECK(res.x[i] == doctest::Approx(x[i] - beta * grad[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("defense disabled or never firing is byte-identical to the solver") {
  const DeqModel m = toy_model(62);
  const Tensor x = Tensor::vector({0.7, 0.1});
  const DomainBox domain = DomainBox::cube(2, -3.0, 3.0);
  for (const SolveMethod method : {SolveMethod::kNaive, SolveMethod::kAnderson}) {
    const SolverConfig solver = solver8(method);
    const DynamicsTrace plain = solve(m, x, solver);

    DefenseConfig off = defense_cfg(0.05, 10, 2, 0.5);
    off.enabled = false;
    const DefenseTrace disabled =
        entropy_reduction_solve(m, x, solver, off, domain);
    REQUIRE(disabled.trace.states.size() == plain.states.size());
    for (std::size_t t = 0; t < plain.states.size(); ++t) {
      CHECK(bitwise_equal(disabled.trace.states[t], plain.states[t]));
      CHECK(disabled.trace.residuals[t] == plain.residuals[t]);
    }
    CHECK(disabled.interventions.empty());

    // Enabled but T_f > N: no intervention ever fires, same trace.
    DefenseConfig idle = defense_cfg(0.05, 10, 9, 0.5);
    const DefenseTrace silent =
        entropy_reduction_solve(m, x, solver, idle, domain);
    CHECK(silent.interventions.empty());
    for (std::size_t t = 0; t < plain.states.size(); ++t) {
      CHECK(bitwise_equal(silent.trace.states[t], plain.states[t]));
    }
  }
}

TEST_CASE("interventions fire on schedule and reduce next-state entropy") {
  const DeqModel m = toy_model(63);
  const Tensor x = Tensor::vector({0.9, -0.4});
  const DomainBox domain = DomainBox::cube(2, -3.0, 3.0);
  const SolverConfig solver = solver8();
  const DefenseConfig cfg = defense_cfg(0.02, 10, 2, 0.8);
  const DefenseTrace guarded =
      entropy_reduction_solve(m, x, solver, cfg, domain);
  REQUIRE(guarded.interventions.size() == 4);  // t+1 in {2, 4, 6, 8}
  for (std::size_t k = 0; k < guarded.interventions.size(); ++k) {
    CHECK(guarded.interventions[k].state_index == 2 * (k + 1));
  }
  REQUIRE(guarded.input_versions.size() == 9);
  for (const Tensor& xv : guarded.input_versions) {
    CHECK(linf_dist(xv, x) <= cfg.budget + 1e-12);
    CHECK(domain.contains(xv, 1e-12));
  }
}

TEST_CASE("descent property: enough small steps lower the frozen objective") {
  const DeqModel m = toy_model(64);
  const Tensor x = Tensor::vector({0.3, 0.6});
  const DomainBox domain = DomainBox::cube(2, -3.0, 3.0);
  Rng rng(2);
  const Tensor z_next = random_tensor({6}, rng, -0.5, 0.5);

  const double before = pred_entropy(head_apply(m, layer_apply(m, z_next, x)));
  Tensor x_cur = x;
  for (int i = 0; i < 200; ++i) {
    const InputUpdateResult step =
        input_update_step(m, z_next, x_cur, x, 1e-4, 0.5, domain);
    REQUIRE(step.gradient_ok);
    x_cur = step.x;
  }
  const double after =
      pred_entropy(head_apply(m, layer_apply(m, z_next, x_cur)));
  CHECK(after <= before);
}

TEST_CASE("defense never mutates parameters and is deterministic") {
  const DeqModel m = toy_model(65);
  const std::uint64_t checksum = param_checksum(m);
  const DomainBox domain = DomainBox::cube(2, -3.0, 3.0);
  const SolverConfig solver = solver8(SolveMethod::kAnderson);
  const DefenseConfig cfg = defense_cfg(0.05, 10, 2, 0.5);
  const Tensor x = Tensor::vector({-0.8, 0.2});

  const DefenseTrace a = entropy_reduction_solve(m, x, solver, cfg, domain);
  const DefenseTrace b = entropy_reduction_solve(m, x, solver, cfg, domain);
  CHECK(param_checksum(m) == checksum);
  REQUIRE(a.trace.states.size() == b.trace.states.size());
  for (std::size_t t = 0; t < a.trace.states.size(); ++t) {
    CHECK(bitwise_equal(a.trace.states[t], b.trace.states[t]));
    CHECK(bitwise_equal(a.input_versions[t], b.input_versions[t]));
  }
}

TEST_CASE("early_state_select: tie-break and constructed final-state model") {
  const DomainBox domain = DomainBox::cube(2, -3.0, 3.0);
  const SolverConfig solver = solver8();
  AttackSpec readymade;
  readymade.kind = AttackKind::kReadymadePgd;
  readymade.steps = 5;
  readymade.budget = 0.2;
  readymade.step_size = 0.05;
  readymade.unroll_steps = 5;
  readymade.seed = 4;

  SUBCASE("all-equal accuracies resolve to the largest index") {
    // A model whose prediction never changes across states: zero injection
    // and zero recurrent weights, biased head.
    DeqModel flat = toy_model(66);
    flat.W = Tensor::zeros({6, 6});
    flat.U = Tensor::zeros({6, 2});
    flat.b = Tensor::zeros({6});
    flat.c = Tensor::vector({1.0, 0.0, -1.0});
    LabeledBatch val;
    Rng rng(5);
    for (int j = 0; j < 10; ++j) {
      val.inputs.push_back(random_tensor({2}, rng, -1.0, 1.0));
      val.labels.push_back(j % 3);
    }
    CHECK(early_state_select(flat, val, domain, readymade, solver) == 8);
  }

  SUBCASE("a head that only reads the final state picks the final state") {
    // Shift-register dynamics: W is the nilpotent subdiagonal shift, the
    // input enters coordinate 0, and the head reads coordinate 7. The label
    // signal reaches the head exactly at state 8; every earlier state gives
    // the constant prediction from the head bias.
    const std::size_t d = 8;
    DeqModel shift;
    shift.W = Tensor::zeros({d, d});
    for (std::size_t r = 1; r < d; ++r) shift.W(r, r - 1) = 1.0;
    shift.U = Tensor::zeros({d, 1});
    shift.U(0, 0) = 1.0;
    shift.b = Tensor::zeros({d});
    shift.sigma = Nonlinearity::kIdentity;
    shift.gamma = 1.0;
    shift.V = Tensor::zeros({2, d});
    shift.V(0, d - 1) = -1.0;
    shift.V(1, d - 1) = 1.0;
    shift.c = Tensor::vector({0.0, 1e-3});

    LabeledBatch val;
    Rng rng(6);
    for (int j = 0; j < 20; ++j) {
      const double sign = j % 2 == 0 ? 1.0 : -1.0;
      val.inputs.push_back(Tensor::vector({sign * rng.uniform(0.9, 1.1)}));
      val.labels.push_back(sign > 0 ? 1 : 0);
    }
    AttackSpec eval = readymade;
    eval.budget = 0.3;
    eval.step_size = 0.075;
    const DomainBox line = DomainBox::cube(1, -3.0, 3.0);
    CHECK(early_state_select(shift, val, line, eval, solver) == 8);
  }

  SUBCASE("empty validation batch is rejected") {
    const DeqModel m = toy_model(67);
    CHECK_THROWS_AS(early_state_select(m, LabeledBatch{}, domain, readymade,
                                       solver),
                    ContractError);
  }
}

TEST_CASE("defended accuracy path matches plain evaluation when idle") {
  const DeqModel m = toy_model(68);
  Rng rng(6);
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  for (int j = 0; j < 12; ++j) {
    inputs.push_back(random_tensor({2}, rng, -1.0, 1.0));
    labels.push_back(j % 3);
  }
  const DomainBox domain = DomainBox::cube(2, -3.0, 3.0);
  const SolverConfig solver = solver8();
  DefenseConfig off = defense_cfg(0.05, 10, 2, 0.5);
  off.enabled = false;
  const double defended =
      defended_accuracy(m, inputs, labels, solver, off, domain, 8);
  const double plain = evaluate_accuracy(m, inputs, labels, solver, 8);
  CHECK(defended == plain);
}

TEST_CASE("wall time scales with R and against T_f") {
  const DeqModel m = toy_model(69, 2, 16, 3);
  const DomainBox domain = DomainBox::cube(2, -3.0, 3.0);
  const SolverConfig solver = solver8();
  Rng rng(7);
  std::vector<Tensor> batch;
  for (int j = 0; j < 4; ++j) batch.push_back(random_tensor({2}, rng, -1, 1));

  const auto measure = [&](std::size_t r, std::size_t tf) {
    const DefenseConfig cfg = defense_cfg(0.01, r, tf, 0.5);
    const auto start = std::chrono::steady_clock::now();
    for (int rep = 0; rep < 20; ++rep) {
      for (const Tensor& x : batch) {
        entropy_reduction_solve(m, x, solver, cfg, domain);
      }
    }
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start)
        .count();
  };

  // Warm-up pass so allocator effects settle.
  measure(1, 8);

  const std::size_t r_values[] = {1, 5, 10, 20};
  double prev = 0.0;
  for (const std::size_t r : r_values) {
    const double t = measure(r, 2);
    if (prev > 0.0) CHECK(t > prev);
    prev = t;
  }
  const std::size_t tf_values[] = {1, 2, 4, 8};
  prev = 0.0;
  for (const std::size_t tf : tf_values) {
    const double t = measure(10, tf);
    if (prev > 0.0) CHECK(t <= prev);
    prev = t;
  }
}

TEST_CASE("defense config validation") {
  DefenseConfig cfg = defense_cfg(0.1, 10, 2, 0.5);
  CHECK_NOTHROW(cfg.validate(8));
  cfg = defense_cfg(0.0, 10, 2, 0.5);
  CHECK_THROWS_AS(cfg.validate(8), ContractError);
  cfg = defense_cfg(0.1, 0, 2, 0.5);
  CHECK_THROWS_AS(cfg.validate(8), ContractError);
  cfg = defense_cfg(0.1, 10, 0, 0.5);
  CHECK_THROWS_AS(cfg.validate(8), ContractError);
  cfg = defense_cfg(0.1, 10, 2, 0.0);
  CHECK_THROWS_AS(cfg.validate(8), ContractError);
}
