#include "fbsdeco/sde.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/rng.hpp"

namespace fbsdeco {

TimeGrid::TimeGrid(double horizon, std::size_t steps)
    : horizon_(horizon), steps_(steps) {
  if (!(horizon > 0.0)) throw ContractError("TimeGrid: horizon must be positive");
  if (steps < 1) throw ContractError("TimeGrid: need at least one step");
  nodes_.resize(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i)
    nodes_[i] = horizon * static_cast<double>(i) / static_cast<double>(steps);
  nodes_[steps] = horizon;  // last step absorbs rounding
}

BrownianBatch sample_brownian(std::size_t paths, const TimeGrid& grid,
                              std::size_t dim, std::uint64_t seed,
                              std::uint64_t stream) {
  if (paths < 1) throw ContractError("sample_brownian: need at least one path");
  BrownianBatch b;
  b.paths = paths;
  b.steps = grid.steps();
  b.dim = dim;
  b.seed = seed;
  b.stream = stream;
  b.incr.resize(paths * b.steps * dim);
  RngStream rng(seed, stream);
  std::vector<double> sdt(b.steps);
  for (std::size_t i = 0; i < b.steps; ++i) sdt[i] = std::sqrt(grid.dt(i));
  std::size_t idx = 0;
  for (std::size_t m = 0; m < paths; ++m)
    for (std::size_t i = 0; i < b.steps; ++i)
      for (std::size_t j = 0; j < dim; ++j) b.incr[idx++] = sdt[i] * rng.normal();
  return b;
}

namespace {

void check_finite_state(const Tensor& v, std::size_t step, const char* what) {
  if (v.all_finite()) return;
  const std::size_t m = v.dim(0);
  const std::size_t w = v.numel() / m;
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t j = 0; j < w; ++j)
      if (!std::isfinite(v[s * w + j]))
        throw DivergenceError("simulation blow-up: non-finite " +
                              std::string(what) + " at sample " +
                              std::to_string(s) + ", step " +
                              std::to_string(step));
}

}  // namespace

SimResult simulate(const FBSDEControlProblem& problem, NetworkBundle& nets,
                   const Y0Source& y0_source, const BrownianBatch& brownian,
                   const TimeGrid& grid, SimMode mode, Tape& tape) {
  problem.check();
  const std::size_t M = brownian.paths;
  const std::size_t N = grid.steps();
  const std::size_t n = problem.state_dim;
  const std::size_t m = problem.backward_dim;
  const std::size_t d = problem.noise_dim;
  if (brownian.steps != N || brownian.dim != d)
    throw ContractError("simulate: Brownian batch does not match grid/noise dim");

  const NetMode net_mode = mode == SimMode::kTrain ? NetMode::kTrain
                           : mode == SimMode::kEval ? NetMode::kEval
                                                    : NetMode::kBatchStats;
  nets.set_mode(net_mode);

  SimResult out;
  TrajectoryBatch& traj = out.traj;
  traj.tape = &tape;
  traj.grid = &grid;
  traj.paths = M;

  // Bind every role once; parameter indices on the tape stay contiguous.
  std::vector<BoundNet> control_nets;
  auto bind_role = [&](const std::string& role, bool follower) -> BoundNet {
    NetworkBundle::Entry& e = nets.at(role);
    RoleBinding rb;
    rb.role = role;
    rb.param_begin = tape.parameters().size();
    BoundNet bound = bind_net(tape, e.config, e.params);
    rb.param_end = tape.parameters().size();
    rb.params = &e.params;
    rb.is_follower = follower;
    out.bindings.push_back(rb);
    return bound;
  };
  for (const auto& spec : problem.controls)
    control_nets.push_back(bind_role(spec.role, false));
  BoundNet y0_net, z_net;
  if (m > 0 && y0_source.use_net) y0_net = bind_role("y0", true);
  if (m > 0) z_net = bind_role("z", true);

  // x_0 = a for every sample
  {
    Tensor x0 = Tensor::zeros({M, n});
    for (std::size_t s = 0; s < M; ++s)
      for (std::size_t j = 0; j < n; ++j)
        x0[s * n + j] = problem.initial_state[j];
    traj.x.push_back(tape.constant(std::move(x0)));
  }

  // y_0 from the y0 network at the (constant) initial state; the input is
  // scaled by max(1, |a|_inf) since this network has no batchnorm to absorb
  // the state's magnitude
  if (m > 0) {
    if (y0_source.use_net) {
      double scale = 1.0;
      for (std::size_t j = 0; j < n; ++j)
        scale = std::max(scale, std::abs(problem.initial_state[j]));
      Tensor x0 = Tensor::zeros({M, n});
      for (std::size_t s = 0; s < M; ++s)
        for (std::size_t j = 0; j < n; ++j)
          x0[s * n + j] = problem.initial_state[j] / scale;
      traj.y0 = mlp_forward(tape, y0_net, tape.constant(std::move(x0)));
    } else {
      if (y0_source.fixed.numel() != m)
        throw ContractError("simulate: fixed y0 does not match backward_dim");
      Tensor y0 = Tensor::zeros({M, m});
      for (std::size_t s = 0; s < M; ++s)
        for (std::size_t j = 0; j < m; ++j) y0[s * m + j] = y0_source.fixed[j];
      traj.y0 = tape.constant(std::move(y0));
    }
    traj.y.push_back(traj.y0);
  }

  const double T = grid.horizon();
  for (std::size_t i = 0; i < N; ++i) {
    const double t = grid.node(i);
    const double dt = grid.dt(i);
    const double t_norm = t / T;
    NodeId xi = traj.x.back();

    NodeId ui = kNoNode;
    if (!control_nets.empty()) {
      ui = net_forward_tx(tape, control_nets[0], t_norm, xi);
      for (std::size_t c = 1; c < control_nets.size(); ++c)
        ui = tape.concat_cols(ui, net_forward_tx(tape, control_nets[c], t_norm, xi));
      traj.u.push_back(ui);
    }

    NodeId zi = kNoNode;
    if (m > 0) {
      NodeId zflat = net_forward_tx(tape, z_net, t_norm, xi);
      zi = tape.reshape(zflat, {M, m, d});
      traj.z.push_back(zi);
    }

    StepRefs refs{&tape, t, xi, m > 0 ? traj.y.back() : kNoNode, zi, ui};

    // dB_i as a constant (M x d) block
    Tensor db = Tensor::zeros({M, d});
    for (std::size_t s = 0; s < M; ++s)
      for (std::size_t j = 0; j < d; ++j) db[s * d + j] = brownian.at(s, i, j);
    NodeId dbi = tape.constant(std::move(db));

    NodeId b = problem.drift(refs);
    NodeId sig = problem.diffusion(refs);
    NodeId xnext = tape.add(tape.add(xi, tape.scale(b, dt)), tape.bmv(sig, dbi));
    check_finite_state(tape.value(xnext), i, "state x");
    traj.x.push_back(xnext);

    if (m > 0) {
      NodeId l = problem.driver(refs);
      NodeId ynext = tape.add(tape.sub(traj.y.back(), tape.scale(l, dt)),
                              tape.bmv(zi, dbi));
      check_finite_state(tape.value(ynext), i, "state y");
      traj.y.push_back(ynext);
    }
  }
  return out;
}

NodeId leader_cost_per_sample(const TrajectoryBatch& traj,
                              const FBSDEControlProblem& problem,
                              const TimeGrid& grid) {
  Tape& tape = *traj.tape;
  const std::size_t M = traj.paths;
  const std::size_t N = grid.steps();
  NodeId acc = tape.constant(Tensor::zeros({M}));
  if (problem.running_cost) {
    for (std::size_t i = 0; i < N; ++i) {
      StepRefs refs{&tape,
                    grid.node(i),
                    traj.x[i],
                    traj.y.empty() ? kNoNode : traj.y[i],
                    traj.z.empty() ? kNoNode : traj.z[i],
                    traj.u.empty() ? kNoNode : traj.u[i]};
      acc = tape.add(acc, tape.scale(problem.running_cost(refs), grid.dt(i)));
    }
  }
  if (problem.terminal_cost)
    acc = tape.add(acc, problem.terminal_cost(tape, traj.x.back()));
  if (problem.initial_cost) {
    if (traj.y0 == kNoNode)
      throw ContractError("leader_cost: gamma given but the problem has no y");
    acc = tape.add(acc, problem.initial_cost(tape, traj.y0));
  }
  return acc;
}

NodeId leader_cost(const TrajectoryBatch& traj,
                   const FBSDEControlProblem& problem, const TimeGrid& grid) {
  return traj.tape->mean_all(leader_cost_per_sample(traj, problem, grid));
}

NodeId follower_cost_per_sample(const TrajectoryBatch& traj,
                                const FBSDEControlProblem& problem) {
  if (traj.y.empty())
    throw ContractError("follower_cost: problem has no backward component");
  Tape& tape = *traj.tape;
  NodeId g = problem.terminal(tape, traj.x.back());
  NodeId resid = tape.sub(traj.y.back(), g);
  return tape.row_sum(tape.square(resid));
}

NodeId follower_cost(const TrajectoryBatch& traj,
                     const FBSDEControlProblem& problem) {
  return traj.tape->mean_all(follower_cost_per_sample(traj, problem));
}

std::size_t count_paths_below(const TrajectoryBatch& traj, double threshold) {
  const Tape& tape = *traj.tape;
  std::size_t count = 0;
  const std::size_t M = traj.paths;
  for (std::size_t s = 0; s < M; ++s) {
    for (const NodeId id : traj.x) {
      const Tensor& v = tape.value(id);
      const std::size_t n = v.numel() / M;
      if (v[s * n] < threshold) {
        ++count;
        break;
      }
    }
  }
  return count;
}

void write_trajectory_csv(const TrajectoryBatch& traj,
                          const FBSDEControlProblem& problem,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("write_trajectory_csv: cannot open " + path);
  const Tape& tape = *traj.tape;
  const std::size_t M = traj.paths;
  const std::size_t N = traj.grid->steps();
  const std::size_t n = problem.state_dim;
  const std::size_t m = problem.backward_dim;
  const std::size_t d = problem.noise_dim;
  const std::size_t k = problem.control_dim();

  out << "sample,step,t";
  for (std::size_t j = 0; j < n; ++j) out << ",x" << j;
  for (std::size_t j = 0; j < m; ++j) out << ",y" << j;
  for (std::size_t j = 0; j < m * d; ++j) out << ",z" << j;
  for (std::size_t j = 0; j < k; ++j) out << ",u" << j;
  out << "\n";

  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    out << ',' << buf;
  };
  for (std::size_t s = 0; s < M; ++s) {
    for (std::size_t i = 0; i <= N; ++i) {
      out << s << ',' << i;
      std::snprintf(buf, sizeof(buf), "%.12g", traj.grid->node(i));
      out << ',' << buf;
      {
        const Tensor& xv = tape.value(traj.x[i]);
        for (std::size_t j = 0; j < n; ++j) put(xv[s * n + j]);
      }
      if (m > 0) {
        const Tensor& yv = tape.value(traj.y[i]);
        for (std::size_t j = 0; j < m; ++j) put(yv[s * m + j]);
      }
      // z and u exist on steps 0..N-1 only
      if (i < N && m > 0) {
        const Tensor& zv = tape.value(traj.z[i]);
        for (std::size_t j = 0; j < m * d; ++j) put(zv[s * m * d + j]);
      } else {
        for (std::size_t j = 0; j < m * d; ++j) out << ',';
      }
      if (i < N && k > 0) {
        const Tensor& uv = tape.value(traj.u[i]);
        for (std::size_t j = 0; j < k; ++j) put(uv[s * k + j]);
      } else {
        for (std::size_t j = 0; j < k; ++j) out << ',';
      }
      out << "\n";
    }
  }
}

}  // namespace fbsdeco
