#include "fbsdeco/problems.hpp"

#include <cmath>
#include <map>
#include <mutex>

#include "fbsdeco/errors.hpp"

namespace fbsdeco {

std::size_t FBSDEControlProblem::control_dim() const {
  std::size_t k = 0;
  for (const auto& c : controls) k += c.dim;
  return k;
}

void FBSDEControlProblem::check() const {
  if (state_dim < 1) throw ContractError(name + ": state_dim must be >= 1");
  if (noise_dim < 1) throw ContractError(name + ": noise_dim must be >= 1");
  if (!(horizon > 0.0)) throw ContractError(name + ": horizon must be positive");
  if (initial_state.numel() != state_dim)
    throw ContractError(name + ": initial state does not match state_dim");
  if (!drift || !diffusion)
    throw ContractError(name + ": drift and diffusion are required");
  if (backward_dim > 0 && (!driver || !terminal))
    throw ContractError(name + ": driver and terminal are required when m > 0");
  for (const auto& c : controls)
    if (c.dim < 1) throw ContractError(name + ": control dims must be >= 1");
}

MarketParams MarketParams::paper(std::size_t n, double T, double nu) {
  MarketParams p;
  p.n = n;
  p.r = 0.03;
  p.mu.assign(n, 0.05);
  p.sigma.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) p.sigma[i * n + i] = 0.1;
  p.x0 = 100.0;
  p.beta = 0.05;
  p.nu = nu;
  p.horizon = T;
  return p;
}

void MarketParams::check() const {
  if (n < 1) throw ContractError("MarketParams: need at least one risky asset");
  if (!(x0 > 0.0)) throw ContractError("MarketParams: x0 must be positive");
  if (nu < 0.0) throw ContractError("MarketParams: nu must be >= 0");
  if (!(horizon > 0.0)) throw ContractError("MarketParams: horizon must be positive");
  if (!mu.empty() && mu.size() != n)
    throw ContractError("MarketParams: mu size mismatch");
  if (!sigma.empty() && sigma.size() != n * n)
    throw ContractError("MarketParams: sigma size mismatch");
}

double MarketParams::mu_at(std::size_t i) const {
  return mu.empty() ? 0.05 : mu[i];
}

double MarketParams::sigma_at(std::size_t i, std::size_t j) const {
  if (sigma.empty()) return i == j ? 0.1 : 0.0;
  return sigma[i * n + j];
}

double driver_l(const MarketParams& params, double c, double y,
                const std::vector<double>& z, DriverCase driver_case) {
  double l = -params.beta * y + (c - c * c);
  if (driver_case == DriverCase::kNonlinear) {
    double zsq = 0.0;
    for (double v : z) zsq += v * v;
    l -= 0.5 * params.nu * zsq;
  }
  return l;
}

namespace {

// Shared market structure; the driver z-term distinguishes the two cases.
FBSDEControlProblem market_problem(const MarketParams& params, bool nonlinear) {
  params.check();
  FBSDEControlProblem prob;
  const std::size_t n = params.n;
  prob.state_dim = 1;
  prob.backward_dim = 1;
  prob.noise_dim = n;
  prob.horizon = params.horizon;
  prob.initial_state = Tensor::from({1}, {params.x0});
  prob.controls = {
      {"pi", n + 1, OutputMap::kSoftmax, 100},
      {"c", 1, OutputMap::kNonneg, 100},
  };
  prob.report_sign = -1.0;  // utility is maximized; leader cost is -utility

  std::vector<double> excess(n);
  for (std::size_t i = 0; i < n; ++i) excess[i] = params.mu_at(i) - params.r;
  std::vector<double> vol(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) vol[i * n + j] = params.sigma_at(i, j);
  const double r = params.r;
  const double beta = params.beta;
  const double nu = params.nu;

  auto risky = [n](const StepRefs& s) {
    return s.tape->slice_cols(s.u, 1, static_cast<std::uint32_t>(n + 1));
  };
  auto consumption = [n](const StepRefs& s) {
    return s.tape->slice_cols(s.u, static_cast<std::uint32_t>(n + 1),
                              static_cast<std::uint32_t>(n + 2));
  };

  // dx = { x r + sum_i x pi^i (mu^i - r) - c } dt + x pi^T sigma dB
  prob.drift = [excess, r, risky, consumption](const StepRefs& s) {
    Tape& t = *s.tape;
    const std::size_t m = t.value(s.x).dim(0);
    NodeId pi_r = risky(s);
    NodeId exc = t.constant(Tensor::from({excess.size()}, excess));
    NodeId pie = t.reshape(t.matmul(pi_r, exc), {m, 1});
    NodeId growth = t.add(t.scale(s.x, r), t.mul(s.x, pie));
    return t.sub(growth, consumption(s));
  };

  prob.diffusion = [vol, n, risky](const StepRefs& s) {
    Tape& t = *s.tape;
    const std::size_t m = t.value(s.x).dim(0);
    NodeId pi_r = risky(s);
    NodeId sig = t.constant(Tensor::from({n, n}, vol));
    NodeId row = t.mul(s.x, t.matmul(pi_r, sig));  // (M x d), x broadcast
    return t.reshape(row, {m, 1, n});
  };

  // l = -beta y + (c - c^2) [- (nu/2)|z|^2]
  auto driver = [beta, nu, n, nonlinear, consumption](const StepRefs& s) {
    Tape& t = *s.tape;
    const std::size_t m = t.value(s.x).dim(0);
    NodeId c = consumption(s);
    NodeId util = t.sub(c, t.square(c));
    NodeId l = t.add(t.scale(s.y, -beta), util);
    if (nonlinear) {
      NodeId zrow = t.reshape(s.z, {m, n});
      NodeId zsq = t.reshape(t.row_sum(t.square(zrow)), {m, 1});
      l = t.add(l, t.scale(zsq, -0.5 * nu));
    }
    return l;
  };
  prob.driver = driver;

  prob.terminal = [](Tape& t, NodeId xT) {  // g(x) = e^{-x}
    return t.exp(t.scale(xT, -1.0));
  };

  // Integral representation of the utility, negated: f = -l, h = -g.
  prob.running_cost = [driver](const StepRefs& s) {
    return s.tape->row_sum(s.tape->scale(driver(s), -1.0));
  };
  prob.terminal_cost = [](Tape& t, NodeId xT) {
    return t.row_sum(t.scale(t.exp(t.scale(xT, -1.0)), -1.0));
  };
  prob.initial_cost = nullptr;
  return prob;
}

}  // namespace

FBSDEControlProblem recursive_utility_linear(const MarketParams& params) {
  FBSDEControlProblem p = market_problem(params, false);
  p.name = "recursive-utility-linear";
  return p;
}

FBSDEControlProblem recursive_utility_nonlinear(const MarketParams& params) {
  if (!(params.nu > 0.0))
    throw ContractError("recursive_utility_nonlinear: nu must be positive");
  FBSDEControlProblem p = market_problem(params, true);
  p.name = "recursive-utility-nonlinear";
  return p;
}

FBSDEControlProblem classical_equivalent(const MarketParams& params) {
  if (params.nu != 0.0)
    throw ContractError(
        "classical_equivalent: only the linear driver (nu = 0) admits the "
        "discounted classical form");
  FBSDEControlProblem p = market_problem(params, false);
  p.name = "classical-equivalent";
  p.backward_dim = 0;  // forward-only: no (y, z)
  p.driver = nullptr;
  p.terminal = nullptr;
  const double beta = params.beta;
  const double T = params.horizon;
  const std::size_t n = params.n;
  // f = -e^{-beta t} u(c), h = -e^{-beta T} g(x): minimize the negated
  // discounted objective.
  p.running_cost = [beta, n](const StepRefs& s) {
    Tape& t = *s.tape;
    NodeId c = t.slice_cols(s.u, static_cast<std::uint32_t>(n + 1),
                            static_cast<std::uint32_t>(n + 2));
    NodeId util = t.sub(c, t.square(c));
    return t.row_sum(t.scale(util, -std::exp(-beta * s.t)));
  };
  p.terminal_cost = [beta, T](Tape& t, NodeId xT) {
    return t.row_sum(t.scale(t.exp(t.scale(xT, -1.0)), -std::exp(-beta * T)));
  };
  return p;
}

AnalyticFollowOnly analytic_followonly_problem(std::size_t n, double T) {
  AnalyticFollowOnly out;
  FBSDEControlProblem& p = out.problem;
  p.name = "analytic-followonly";
  p.state_dim = n;
  p.backward_dim = 1;
  p.noise_dim = n;
  p.horizon = T;
  p.initial_state = Tensor::zeros({n});
  p.controls = {};  // frozen (absent) leader control

  p.drift = [n](const StepRefs& s) {
    const std::size_t m = s.tape->value(s.x).dim(0);
    return s.tape->constant(Tensor::zeros({m, n}));
  };
  p.diffusion = [n](const StepRefs& s) {
    const std::size_t m = s.tape->value(s.x).dim(0);
    Tensor eye = Tensor::zeros({m, n, n});
    for (std::size_t b = 0; b < m; ++b)
      for (std::size_t i = 0; i < n; ++i) eye[(b * n + i) * n + i] = 1.0;
    return s.tape->constant(std::move(eye));
  };
  p.driver = [](const StepRefs& s) {
    const std::size_t m = s.tape->value(s.x).dim(0);
    return s.tape->constant(Tensor::zeros({m, 1}));
  };
  p.terminal = [n](Tape& t, NodeId xT) {
    const std::size_t m = t.value(xT).dim(0);
    return t.reshape(t.row_sum(xT), {m, 1});
  };
  out.y0_exact = 0.0;
  out.z_exact.assign(n, 1.0);
  return out;
}

AnalyticFollowOnly analytic_followonly_beta(double beta, double T,
                                            std::size_t n) {
  AnalyticFollowOnly out = analytic_followonly_problem(n, T);
  FBSDEControlProblem& p = out.problem;
  p.name = "analytic-followonly-beta";
  p.driver = [beta](const StepRefs& s) {
    return s.tape->scale(s.y, -beta);
  };
  p.terminal = [](Tape& t, NodeId xT) {
    const std::size_t m = t.value(xT).dim(0);
    return t.constant(Tensor::full({m, 1}, 1.0));
  };
  out.y0_exact = std::exp(-beta * T);
  out.z_exact.assign(n, 0.0);
  return out;
}

FBSDEControlProblem tiny_coupled_problem(double T) {
  FBSDEControlProblem p;
  p.name = "tiny-coupled";
  p.state_dim = 2;
  p.backward_dim = 1;
  p.noise_dim = 2;
  p.horizon = T;
  p.initial_state = Tensor::from({2}, {0.5, -0.3});
  p.controls = {{"u", 2, OutputMap::kIdentity, 4}};
  p.report_sign = 1.0;

  auto zrow = [](const StepRefs& s) {
    const std::size_t m = s.tape->value(s.x).dim(0);
    return s.tape->reshape(s.z, {m, 2});
  };

  p.drift = [zrow](const StepRefs& s) {
    Tape& t = *s.tape;
    const std::size_t m = t.value(s.x).dim(0);
    NodeId ones2 = t.constant(Tensor::full({m, 2}, 1.0));
    NodeId b = t.add(t.scale(s.x, 0.05), t.scale(s.u, 0.1));
    b = t.add(b, t.scale(t.mul(s.y, ones2), 0.2));
    return t.add(b, t.scale(zrow(s), 0.1));
  };

  p.diffusion = [](const StepRefs& s) {
    Tape& t = *s.tape;
    const std::size_t m = t.value(s.x).dim(0);
    Tensor eye = Tensor::zeros({m, 4});
    for (std::size_t b = 0; b < m; ++b) {
      eye[b * 4 + 0] = 0.3;
      eye[b * 4 + 3] = 0.3;
    }
    NodeId base = t.constant(std::move(eye));
    NodeId uu = t.scale(t.concat_cols(s.u, s.u), 0.05);
    NodeId ones4 = t.constant(Tensor::full({m, 4}, 1.0));
    NodeId yterm = t.scale(t.mul(s.y, ones4), 0.02);
    return t.reshape(t.add(t.add(base, uu), yterm), {m, 2, 2});
  };

  p.driver = [zrow](const StepRefs& s) {
    Tape& t = *s.tape;
    const std::size_t m = t.value(s.x).dim(0);
    NodeId l = t.scale(s.y, -0.1);
    l = t.add(l, t.scale(t.reshape(t.row_sum(s.x), {m, 1}), 0.05));
    l = t.add(l, t.scale(t.reshape(t.row_sum(t.square(zrow(s))), {m, 1}), 0.05));
    return t.add(l, t.scale(t.reshape(t.row_sum(s.u), {m, 1}), 0.1));
  };

  p.terminal = [](Tape& t, NodeId xT) {
    const std::size_t m = t.value(xT).dim(0);
    NodeId r = t.reshape(t.row_sum(xT), {m, 1});
    return t.square(t.add_scalar(t.scale(r, 0.3), 0.1));
  };

  p.running_cost = [zrow](const StepRefs& s) {
    Tape& t = *s.tape;
    NodeId f = t.scale(t.row_sum(t.square(s.u)), 0.5);
    f = t.add(f, t.scale(t.row_sum(t.square(s.x)), 0.1));
    f = t.add(f, t.scale(t.row_sum(t.square(s.y)), 0.05));
    return t.add(f, t.scale(t.row_sum(t.square(zrow(s))), 0.02));
  };
  p.terminal_cost = [](Tape& t, NodeId xT) {
    return t.scale(t.row_sum(t.square(xT)), 0.2);
  };
  p.initial_cost = [](Tape& t, NodeId y0) {
    return t.scale(t.row_sum(t.square(y0)), 0.5);
  };
  return p;
}

namespace {

std::map<std::string, ProblemFactory>& registry() {
  static std::map<std::string, ProblemFactory> reg = {
      {"paper-market-linear",
       [](std::size_t n, double T) {
         return recursive_utility_linear(MarketParams::paper(n, T));
       }},
      {"paper-market-nonlinear",
       [](std::size_t n, double T) {
         return recursive_utility_nonlinear(MarketParams::paper(n, T, 10.0));
       }},
      {"classical-market",
       [](std::size_t n, double T) {
         return classical_equivalent(MarketParams::paper(n, T));
       }},
      {"analytic-followonly",
       [](std::size_t n, double T) {
         return analytic_followonly_problem(n ? n : 2, T).problem;
       }},
      {"analytic-followonly-beta",
       [](std::size_t, double T) {
         return analytic_followonly_beta(0.05, T).problem;
       }},
  };
  return reg;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

void register_problem(const std::string& name, ProblemFactory factory) {
  std::lock_guard<std::mutex> lock(registry_mutex());
  registry()[name] = std::move(factory);
}

FBSDEControlProblem make_problem(const std::string& name, std::size_t n,
                                 double T) {
  ProblemFactory factory;
  {
    std::lock_guard<std::mutex> lock(registry_mutex());
    auto it = registry().find(name);
    if (it == registry().end())
      throw ContractError("unknown problem preset '" + name + "'");
    factory = it->second;
  }
  return factory(n, T);
}

std::vector<std::string> problem_names() {
  std::lock_guard<std::mutex> lock(registry_mutex());
  std::vector<std::string> names;
  for (const auto& [k, v] : registry()) names.push_back(k);
  return names;
}

}  // namespace fbsdeco
