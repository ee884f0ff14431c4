#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fbsdeco/nets.hpp"
#include "fbsdeco/tape.hpp"
#include "fbsdeco/tensor.hpp"

namespace fbsdeco {

// One control emitted by a dedicated network; the full control vector u is
// the concatenation of all declared controls in order.
struct ControlSpec {
  std::string role;
  std::size_t dim = 1;
  OutputMap map = OutputMap::kIdentity;
  std::size_t hidden_width = 0;  // 0 = state_dim + 10
};

// Batch tensors of one time step, recorded on a tape.
struct StepRefs {
  Tape* tape = nullptr;
  double t = 0.0;
  NodeId x = kNoNode;  // (M x n)
  NodeId y = kNoNode;  // (M x m), absent for forward-only problems
  NodeId z = kNoNode;  // (M x m x d)
  NodeId u = kNoNode;  // (M x k)
};

// Data of one control problem: dynamics, driver, terminal condition and the
// three cost pieces of the leader functional. Coefficient callbacks build
// tape ops so the whole simulation stays differentiable. Instances are
// immutable after construction and safe to share across threads.
struct FBSDEControlProblem {
  std::string name;
  std::size_t state_dim = 1;     // n
  std::size_t backward_dim = 1;  // m; 0 turns the problem forward-only
  std::size_t noise_dim = 1;     // d
  std::vector<ControlSpec> controls;
  double horizon = 1.0;
  Tensor initial_state;  // (n)

  using StepFn = std::function<NodeId(const StepRefs&)>;
  using TerminalFn = std::function<NodeId(Tape&, NodeId)>;

  StepFn drift;              // b -> (M x n)
  StepFn diffusion;          // sigma -> (M x n x d)
  StepFn driver;             // l -> (M x m)
  TerminalFn terminal;       // g(x_T) -> (M x m)
  StepFn running_cost;       // f -> (M); null = 0
  TerminalFn terminal_cost;  // h(x_T) -> (M); null = 0
  TerminalFn initial_cost;   // gamma(y_0) -> (M); null = 0
  // Reported value = report_sign * leader cost (maximization problems are
  // trained on the negated objective).
  double report_sign = 1.0;

  std::size_t control_dim() const;
  void check() const;
};

struct MarketParams {
  std::size_t n = 10;        // risky assets; Brownian dimension d = n
  double r = 0.03;           // risk-free rate
  std::vector<double> mu;    // appreciation rates (n), default 0.05 each
  std::vector<double> sigma; // volatility matrix (n x n) row-major, default 0.1 I
  double x0 = 100.0;         // initial wealth
  double beta = 0.05;        // utility discount rate
  double nu = 0.0;           // risk-aversion coefficient (nonlinear case)
  double horizon = 0.25;

  // The paper's market: r=0.03, mu=0.05, sigma=0.1 I, x0=100, beta=0.05.
  static MarketParams paper(std::size_t n, double T, double nu = 0.0);
  void check() const;
  double mu_at(std::size_t i) const;
  double sigma_at(std::size_t i, std::size_t j) const;
};

enum class DriverCase { kLinear, kNonlinear };

// Generalized recursive utility driver: -beta y + u(c) with u(c) = c - c^2,
// minus (nu/2)|z|^2 in the nonlinear case.
double driver_l(const MarketParams& params, double c, double y,
                const std::vector<double>& z, DriverCase driver_case);

// Investment-consumption problem under recursive utility. Controls are the
// portfolio (softmax over n+1 weights, risk-free share first) and the
// consumption rate (nonneg scalar). The leader objective is the utility in
// integral representation, negated for minimization: f = -l, h = -g.
FBSDEControlProblem recursive_utility_linear(const MarketParams& params);
FBSDEControlProblem recursive_utility_nonlinear(const MarketParams& params);

// Forward-only equivalent of the linear-driver problem: objective
// sum_i e^{-beta t_i} u(c_i) dt_i + e^{-beta T} g(x_N), maximized over the
// same constrained (pi, c) networks. Requires nu == 0.
FBSDEControlProblem classical_equivalent(const MarketParams& params);

// Follower-only verification problem with a closed-form solution:
// b = 0, sigma = I, l = 0, g(x) = sum_j x_j, a = 0 so that y(0) = 0 and
// z = (1,...,1) exactly, for any Brownian draw.
struct AnalyticFollowOnly {
  FBSDEControlProblem problem;
  double y0_exact = 0.0;
  std::vector<double> z_exact;  // (d)
};
AnalyticFollowOnly analytic_followonly_problem(std::size_t n = 2, double T = 1.0);

// Variant with driver l = -beta y and g = 1, frozen u: continuous solution
// y(0) = e^{-beta T}; the discrete counterpart is (1 + beta dt)^{-N}.
AnalyticFollowOnly analytic_followonly_beta(double beta = 0.05, double T = 1.0,
                                            std::size_t n = 2);

// Small smooth fully-coupled instance (n=2, m=1, d=2, one 2-dim control,
// all coefficients depend on x, y, z and u) used for gradient verification
// against finite differences.
FBSDEControlProblem tiny_coupled_problem(double T = 0.4);

// Named presets selectable from the CLI.
using ProblemFactory =
    std::function<FBSDEControlProblem(std::size_t n, double T)>;
void register_problem(const std::string& name, ProblemFactory factory);
FBSDEControlProblem make_problem(const std::string& name, std::size_t n,
                                 double T);
std::vector<std::string> problem_names();

}  // namespace fbsdeco
