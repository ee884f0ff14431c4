#include <doctest.h>

#include <cmath>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/problems.hpp"
#include "fbsdeco/rng.hpp"
#include "fbsdeco/sde.hpp"
#include "fbsdeco/trainer.hpp"

using namespace fbsdeco;

namespace {

// Evaluates a market coefficient callback at one explicit (x, pi, c, y, z).
struct MarketProbe {
  Tape tape;
  StepRefs refs;

  MarketProbe(const MarketParams& params, double x, std::vector<double> pi,
              double c, double y = 0.0, std::vector<double> z = {}) {
    const std::size_t n = params.n;
    refs.tape = &tape;
    refs.t = 0.0;
    refs.x = tape.constant(Tensor::from({1, 1}, {x}));
    refs.y = tape.constant(Tensor::from({1, 1}, {y}));
    if (z.empty()) z.assign(n, 0.0);
    refs.z = tape.constant(Tensor::from({1, 1, n}, z));
    std::vector<double> u = pi;
    u.push_back(c);
    refs.u = tape.constant(Tensor::from({1, n + 2}, u));
  }
};

std::vector<double> all_riskfree(std::size_t n) {
  std::vector<double> pi(n + 1, 0.0);
  pi[0] = 1.0;
  return pi;
}

std::vector<double> all_in_asset1(std::size_t n) {
  std::vector<double> pi(n + 1, 0.0);
  pi[1] = 1.0;
  return pi;
}

}  // namespace

TEST_CASE("market drift worked examples") {
  MarketParams params = MarketParams::paper(10, 0.25);
  FBSDEControlProblem prob = recursive_utility_linear(params);

  SUBCASE("all wealth risk-free at x=100, c=0: drift is x r = 3.0") {
    MarketProbe probe(params, 100.0, all_riskfree(10), 0.0);
    NodeId b = prob.drift(probe.refs);
    CHECK(probe.tape.value(b)[0] == doctest::Approx(3.0).epsilon(1e-14));
  }
  SUBCASE("all wealth in asset 1: drift is x (r + mu - r) = 5.0") {
    MarketProbe probe(params, 100.0, all_in_asset1(10), 0.0);
    NodeId b = prob.drift(probe.refs);
    CHECK(probe.tape.value(b)[0] == doctest::Approx(5.0).epsilon(1e-14));
  }
  SUBCASE("consumption subtracts directly") {
    MarketProbe probe(params, 100.0, all_riskfree(10), 2.5);
    NodeId b = prob.drift(probe.refs);
    CHECK(probe.tape.value(b)[0] == doctest::Approx(0.5).epsilon(1e-13));
  }
}

TEST_CASE("market diffusion row: all in asset 1 with sigma = 0.1 I") {
  MarketParams params = MarketParams::paper(10, 0.25);
  FBSDEControlProblem prob = recursive_utility_linear(params);
  MarketProbe probe(params, 100.0, all_in_asset1(10), 0.0);
  NodeId sig = prob.diffusion(probe.refs);
  const Tensor& row = probe.tape.value(sig);
  REQUIRE(row.shape() == std::vector<std::size_t>{1, 1, 10});
  CHECK(row[0] == doctest::Approx(10.0).epsilon(1e-14));
  for (std::size_t j = 1; j < 10; ++j) CHECK(row[j] == 0.0);
}

TEST_CASE("driver_l worked examples") {
  MarketParams params = MarketParams::paper(10, 0.25);
  SUBCASE("linear: c=0.5, y=0 gives u(c) = 0.25") {
    CHECK(driver_l(params, 0.5, 0.0, {}, DriverCase::kLinear) ==
          doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("nonlinear: |z|^2 = 0.01, nu = 10 subtracts 0.05") {
    MarketParams p2 = MarketParams::paper(10, 0.25, 10.0);
    CHECK(driver_l(p2, 0.0, 0.0, {0.1}, DriverCase::kNonlinear) ==
          doctest::Approx(-0.05).epsilon(1e-14));
  }
  SUBCASE("linear: c=0, y=1, beta=0.05 gives -0.05") {
    CHECK(driver_l(params, 0.0, 1.0, {}, DriverCase::kLinear) ==
          doctest::Approx(-0.05).epsilon(1e-15));
  }
  SUBCASE("nu=0 collapses nonlinear to linear for random inputs") {
    MarketParams p0 = MarketParams::paper(4, 0.5, 0.0);
    RngStream rng(4, 0);
    for (int i = 0; i < 100; ++i) {
      const double c = rng.uniform(0.0, 2.0), y = rng.uniform(-1.0, 1.0);
      std::vector<double> z = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      CHECK(driver_l(p0, c, y, z, DriverCase::kNonlinear) ==
            driver_l(p0, c, y, z, DriverCase::kLinear));
    }
  }
}

TEST_CASE("market driver callback matches driver_l") {
  for (bool nonlinear : {false, true}) {
    MarketParams params = MarketParams::paper(3, 0.5, nonlinear ? 10.0 : 0.0);
    FBSDEControlProblem prob = nonlinear ? recursive_utility_nonlinear(params)
                                         : recursive_utility_linear(params);
    RngStream rng(8, nonlinear ? 1 : 0);
    for (int i = 0; i < 50; ++i) {
      const double c = rng.uniform(0.0, 1.0);
      const double y = rng.uniform(-0.5, 0.5);
      std::vector<double> z = {rng.uniform(-1, 1), rng.uniform(-1, 1),
                               rng.uniform(-1, 1)};
      MarketProbe probe(params, 50.0, all_riskfree(3), c, y, z);
      const double direct = driver_l(
          params, c, y, z,
          nonlinear ? DriverCase::kNonlinear : DriverCase::kLinear);
      CHECK(probe.tape.value(prob.driver(probe.refs))[0] ==
            doctest::Approx(direct).epsilon(1e-13));
    }
  }
}

TEST_CASE("terminal utility and integral-representation costs are consistent") {
  MarketParams params = MarketParams::paper(2, 0.5);
  FBSDEControlProblem prob = recursive_utility_linear(params);
  Tape tape;
  NodeId xT = tape.constant(Tensor::from({2, 1}, {1.0, 3.0}));
  CHECK(tape.value(prob.terminal(tape, xT))[0] ==
        doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  // h = -g so the leader objective is the negated utility
  CHECK(tape.value(prob.terminal_cost(tape, xT))[0] ==
        doctest::Approx(-std::exp(-1.0)).epsilon(1e-15));
  // f = -l at an explicit point
  MarketProbe probe(params, 100.0, all_riskfree(2), 0.5, 0.2);
  const double l = driver_l(params, 0.5, 0.2, {}, DriverCase::kLinear);
  CHECK(probe.tape.value(prob.running_cost(probe.refs))[0] ==
        doctest::Approx(-l).epsilon(1e-13));
  CHECK(prob.report_sign == -1.0);
}

TEST_CASE("self-financing identity on 1000 random allocations") {
  MarketParams params = MarketParams::paper(5, 1.0);
  FBSDEControlProblem prob = recursive_utility_linear(params);
  RngStream rng(123, 7);
  for (int trial = 0; trial < 1000; ++trial) {
    const double x = rng.uniform(1.0, 200.0);
    const double c = rng.uniform(0.0, 2.0);
    std::vector<double> pi(6);
    double sum = 0.0;
    for (double& v : pi) {
      v = rng.uniform(0.0, 1.0);
      sum += v;
    }
    for (double& v : pi) v /= sum;
    MarketProbe probe(params, x, pi, c);
    // direct re-implementation of eqWealthPro coefficients
    double drift = x * params.r - c;
    for (std::size_t i = 0; i < 5; ++i)
      drift += x * pi[i + 1] * (params.mu_at(i) - params.r);
    std::vector<double> vol(5, 0.0);
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t i = 0; i < 5; ++i)
        vol[j] += x * pi[i + 1] * params.sigma_at(i, j);
    const double got_b = probe.tape.value(prob.drift(probe.refs))[0];
    CHECK(std::abs(got_b - drift) <= 1e-12 * std::max(1.0, std::abs(drift)));
    const Tensor& got_s = probe.tape.value(prob.diffusion(probe.refs));
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(std::abs(got_s[j] - vol[j]) <=
            1e-12 * std::max(1.0, std::abs(vol[j])));
  }
}

TEST_CASE("classical equivalent worked examples") {
  SUBCASE("requires the linear driver") {
    MarketParams bad = MarketParams::paper(3, 0.5, 10.0);
    CHECK_THROWS_AS(classical_equivalent(bad), ContractError);
  }
  SUBCASE("beta = 0 removes discounting") {
    MarketParams params = MarketParams::paper(2, 1.0);
    params.beta = 0.0;
    FBSDEControlProblem prob = classical_equivalent(params);
    CHECK(prob.backward_dim == 0);
    MarketProbe probe(params, 100.0, all_riskfree(2), 0.5);
    probe.refs.t = 0.77;  // discount factor e^0 = 1 at any t
    CHECK(probe.tape.value(prob.running_cost(probe.refs))[0] ==
          doctest::Approx(-(0.5 - 0.25)).epsilon(1e-14));
  }
  SUBCASE("c = 0: objective reduces to e^{-beta T} g(x_T)") {
    MarketParams params = MarketParams::paper(2, 0.5);
    FBSDEControlProblem prob = classical_equivalent(params);
    MarketProbe probe(params, 100.0, all_riskfree(2), 0.0);
    CHECK(probe.tape.value(prob.running_cost(probe.refs))[0] == 0.0);
    Tape tape;
    NodeId xT = tape.constant(Tensor::from({1, 1}, {2.0}));
    CHECK(tape.value(prob.terminal_cost(tape, xT))[0] ==
          doctest::Approx(-std::exp(-0.05 * 0.5) * std::exp(-2.0))
              .epsilon(1e-14));
  }
}

TEST_CASE("discrete equivalence: classical objective equals the recursive "
          "solve on a one-step noiseless grid") {
  // sigma = 0, one tiny step: the explicit-Euler backward solve gives
  // y0 = (g(x1) + u(c) dt) / (1 + beta dt); the classical discrete objective
  // is u(c) dt + e^{-beta dt} g(x1). Both represent the same utility; the
  // step is small enough that the discounting conventions agree to 1e-10.
  MarketParams params = MarketParams::paper(2, 1e-6);
  params.x0 = 1.0;
  params.sigma.assign(4, 0.0);
  const double dt = params.horizon;
  const double c = 0.3;
  std::vector<double> pi = all_riskfree(2);

  // shared deterministic forward step (identical Brownian draws, killed by
  // sigma = 0)
  const double drift = params.x0 * params.r - c;
  const double x1 = params.x0 + drift * dt;
  const double g = std::exp(-x1);
  const double uc = c - c * c;

  const double recursive_y0 = (g + uc * dt) / (1.0 + params.beta * dt);
  const double classical = uc * dt + std::exp(-params.beta * dt) * g;
  CHECK(std::abs(recursive_y0 - classical) / std::abs(classical) < 1e-10);

  // the recursive solve satisfies the simulated terminal constraint exactly
  FBSDEControlProblem prob = recursive_utility_linear(params);
  Tape tape;
  StepRefs refs;
  refs.tape = &tape;
  refs.t = 0.0;
  refs.x = tape.constant(Tensor::from({1, 1}, {params.x0}));
  refs.y = tape.constant(Tensor::from({1, 1}, {recursive_y0}));
  refs.z = tape.constant(Tensor::zeros({1, 1, 2}));
  std::vector<double> u = pi;
  u.push_back(c);
  refs.u = tape.constant(Tensor::from({1, 4}, u));
  const double l0 = tape.value(prob.driver(refs))[0];
  const double y1 = recursive_y0 - l0 * dt;
  CHECK(std::abs(y1 - g) < 1e-15);
}

TEST_CASE("analytic follow-only problem: closed-form solution") {
  AnalyticFollowOnly an = analytic_followonly_problem(3, 1.0);
  CHECK(an.y0_exact == 0.0);
  REQUIRE(an.z_exact.size() == 3);
  for (double z : an.z_exact) CHECK(z == 1.0);

  // telescoping: y_N = sum z dB equals g(x_N) = sum x for every draw
  TimeGrid grid(1.0, 25);
  BrownianBatch b = sample_brownian(32, grid, 3, 5, 0);
  NetworkBundle nets = build_bundle(an.problem, 1);
  // pin z to the exact all-ones row: zero weights, final bias 1
  ParameterSet& z = nets.at("z").params;
  for (auto& w : z.weights) w.fill(0.0);
  for (auto& bb : z.biases) bb.fill(0.0);
  z.biases.back().fill(1.0);
  Tape tape;
  SimResult sim =
      simulate(an.problem, nets, Y0Source::value(Tensor::from({1}, {0.0})), b,
               grid, SimMode::kEval, tape);
  CHECK(tape.value(follower_cost(sim.traj, an.problem)).item() < 1e-22);
}

TEST_CASE("beta variant: discrete counterpart of e^{-beta T}") {
  AnalyticFollowOnly an = analytic_followonly_beta(0.05, 1.0, 2);
  CHECK(an.y0_exact == doctest::Approx(std::exp(-0.05)).epsilon(1e-12));
  CHECK(an.y0_exact == doctest::Approx(0.951229).epsilon(1e-6));

  // recursion oracle: y0 = (1 + beta dt)^{-N} hits g = 1 exactly
  TimeGrid grid(1.0, 25);
  double y0 = 1.0;
  for (std::size_t i = 0; i < 25; ++i) y0 /= 1.0 + 0.05 * grid.dt(i);
  double y = y0;
  for (std::size_t i = 0; i < 25; ++i) y *= 1.0 + 0.05 * grid.dt(i);
  CHECK(y == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(y0 == doctest::Approx(std::pow(1.002, -25.0)).epsilon(1e-12));
  // close to but distinct from the continuous value
  CHECK(std::abs(y0 - an.y0_exact) < 1e-4);
}

TEST_CASE("problem registry: presets exist, unknown names are rejected") {
  auto names = problem_names();
  CHECK(std::find(names.begin(), names.end(), "paper-market-linear") !=
        names.end());
  CHECK(std::find(names.begin(), names.end(), "paper-market-nonlinear") !=
        names.end());
  FBSDEControlProblem p = make_problem("paper-market-linear", 10, 0.25);
  CHECK(p.noise_dim == 10);
  CHECK(p.horizon == 0.25);
  CHECK(p.control_dim() == 12);
  CHECK_THROWS_AS(make_problem("no-such-problem", 1, 1.0), ContractError);

  register_problem("tiny", [](std::size_t, double T) {
    return tiny_coupled_problem(T);
  });
  CHECK(make_problem("tiny", 0, 0.3).horizon == 0.3);
}

TEST_CASE("market params validation") {
  MarketParams p = MarketParams::paper(3, 0.5);
  CHECK_NOTHROW(p.check());
  p.x0 = 0.0;
  CHECK_THROWS_AS(p.check(), ContractError);
  p.x0 = 100.0;
  p.mu = {0.05};
  CHECK_THROWS_AS(p.check(), ContractError);
}
