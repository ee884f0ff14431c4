#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbsdeco/nets.hpp"
#include "fbsdeco/problems.hpp"
#include "fbsdeco/tape.hpp"
#include "fbsdeco/tensor.hpp"

namespace fbsdeco {

// Uniform partition of [0, T]; the node sequence telescopes so the step
// sizes sum to T exactly.
class TimeGrid {
 public:
  TimeGrid(double horizon, std::size_t steps);

  double horizon() const { return horizon_; }
  std::size_t steps() const { return steps_; }
  double node(std::size_t i) const { return nodes_[i]; }
  double dt(std::size_t i) const { return nodes_[i + 1] - nodes_[i]; }

 private:
  double horizon_;
  std::size_t steps_;
  std::vector<double> nodes_;
};

// Batch of Brownian increments, increment (m, i, :) ~ N(0, dt_i I_d).
struct BrownianBatch {
  std::size_t paths = 0, steps = 0, dim = 0;
  std::uint64_t seed = 0, stream = 0;
  std::vector<double> incr;  // (paths x steps x dim)

  double at(std::size_t m, std::size_t i, std::size_t j) const {
    return incr[(m * steps + i) * dim + j];
  }
};

// Deterministic in (seed, stream); distinct streams are disjoint.
BrownianBatch sample_brownian(std::size_t paths, const TimeGrid& grid,
                              std::size_t dim, std::uint64_t seed,
                              std::uint64_t stream);

// kFrozenStats runs the networks on batch statistics without touching the
// running stats (metric evaluation through the training normalization).
enum class SimMode : std::uint8_t { kTrain, kEval, kFrozenStats };

// y0 either comes from the y0 network or is pinned to a fixed vector
// (verification runs).
struct Y0Source {
  bool use_net = true;
  Tensor fixed;  // (m)
  static Y0Source net() { return {true, {}}; }
  static Y0Source value(Tensor y0) { return {false, std::move(y0)}; }
};

// Simulated paths held as tape nodes, differentiable end to end.
struct TrajectoryBatch {
  Tape* tape = nullptr;
  const TimeGrid* grid = nullptr;
  std::size_t paths = 0;
  std::vector<NodeId> x;  // steps+1 nodes of (M x n)
  std::vector<NodeId> y;  // steps+1 nodes of (M x m); empty when m == 0
  std::vector<NodeId> z;  // steps nodes of (M x m x d)
  std::vector<NodeId> u;  // steps nodes of (M x k); empty when no controls
  NodeId y0 = kNoNode;    // (M x m)
};

// Tape parameter-index span of one bound network role.
struct RoleBinding {
  std::string role;
  std::size_t param_begin = 0, param_end = 0;
  ParameterSet* params = nullptr;
  bool is_follower = false;  // y0 / z networks
};

struct SimResult {
  TrajectoryBatch traj;
  std::vector<RoleBinding> bindings;
};

// Euler-Maruyama rollout of the controlled forward system: controls and z
// are network evaluations at (t_i, x_i), y0 from the y0 network (or pinned),
// x_{i+1} = x_i + b dt + sigma dB, y_{i+1} = y_i - l dt + z dB.
// Networks run in train mode (batch statistics, running stats updated) when
// mode == kTrain, eval mode otherwise. NaN states raise DivergenceError
// naming the first offending (sample, step).
SimResult simulate(const FBSDEControlProblem& problem, NetworkBundle& nets,
                   const Y0Source& y0_source, const BrownianBatch& brownian,
                   const TimeGrid& grid, SimMode mode, Tape& tape);

// Discrete leader cost: mean over samples of
// sum_i f(t_i, x_i, y_i, z_i, u_i) dt_i + h(x_N) + gamma(y_0).
NodeId leader_cost(const TrajectoryBatch& traj,
                   const FBSDEControlProblem& problem, const TimeGrid& grid);
// Per-sample leader cost vector (M), before the batch mean.
NodeId leader_cost_per_sample(const TrajectoryBatch& traj,
                              const FBSDEControlProblem& problem,
                              const TimeGrid& grid);

// Discrete follower cost: mean over samples of |y_N - g(x_N)|^2.
NodeId follower_cost(const TrajectoryBatch& traj,
                     const FBSDEControlProblem& problem);
NodeId follower_cost_per_sample(const TrajectoryBatch& traj,
                                const FBSDEControlProblem& problem);

// Paths whose first state coordinate dips below the threshold at any node
// (negative-wealth diagnostic for the market problem).
std::size_t count_paths_below(const TrajectoryBatch& traj, double threshold);

// Debug CSV: sample,step,t,x...,y...,z...,u...
void write_trajectory_csv(const TrajectoryBatch& traj,
                          const FBSDEControlProblem& problem,
                          const std::string& path);

}  // namespace fbsdeco
