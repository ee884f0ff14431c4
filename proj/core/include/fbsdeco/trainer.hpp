#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fbsdeco/optim.hpp"
#include "fbsdeco/problems.hpp"
#include "fbsdeco/sde.hpp"

namespace fbsdeco {

// Penalty updating coefficient kappa = num/den: each cycle runs den leader
// updates and num follower updates (leader first by default), so kappa is
// the follower:leader update ratio. Integer kappa has den = 1 and matches
// the rule "leader when iteration mod (kappa+1) == 0".
struct Kappa {
  std::uint32_t num = 19;
  std::uint32_t den = 1;

  std::uint32_t cycle() const { return num + den; }
  double value() const { return static_cast<double>(num) / den; }
  std::string str() const;
  static Kappa parse(const std::string& text);  // "19" or "1/4"
  bool operator==(const Kappa& o) const { return num == o.num && den == o.den; }
};

struct TrainingConfig {
  Kappa kappa{19, 1};
  std::uint64_t maxstep = 18000;
  std::size_t m_train = 64;
  std::size_t m_test = 512;
  std::size_t time_points = 25;  // N
  OptimizerConfig leader_opt;    // Xi_1
  OptimizerConfig follower_opt;  // Xi_2
  // per-role overrides; roles fall back to leader_opt / follower_opt
  std::vector<std::pair<std::string, OptimizerConfig>> role_opts;
  std::uint64_t seed = 1;
  std::uint64_t eval_interval = 20;
  Precision precision = Precision::f64;
  bool leader_first = true;

  TrainingConfig();
  void check(bool has_leader, bool has_follower) const;
  const OptimizerConfig& optimizer_for(const std::string& role,
                                       bool follower_role) const;
};

struct TrainingRecord {
  std::uint64_t iteration = 0;
  double j_leader = 0.0;
  double j_follower = 0.0;
  double inte_y0 = 0.0;    // discrete integral-form value (sign restored)
  double para_y0 = 0.0;    // y0-network output at the initial state
  double distance = 0.0;   // |integral - parametric|
  double wall_s = 0.0;
};

struct TrainResult {
  NetworkBundle nets;
  std::vector<TrainingRecord> history;
  // update_log[i]: 1 = leader update at iteration i, 0 = follower update
  std::vector<std::uint8_t> update_log;
};

// Networks for every control role plus y0/z when the problem has a backward
// component. Role init seeds derive from (seed, role index).
NetworkBundle build_bundle(const FBSDEControlProblem& problem,
                           std::uint64_t seed);

// Evaluation on a fixed test batch, eval-mode networks. Chunked internally;
// sums run in fixed order so results are reproducible.
TrainingRecord evaluate(NetworkBundle& nets, const FBSDEControlProblem& problem,
                        const BrownianBatch& test, const TimeGrid& grid,
                        Precision precision = Precision::f64);

// Slot rule of one iteration: with kappa = num/den and leader-first order,
// the first den slots of each (num+den)-cycle are leader updates.
bool leader_slot(std::uint64_t iter, const Kappa& kappa, bool leader_first);

struct TrainHooks {
  // Called after every parameter update with the iteration index and slot.
  std::function<void(std::uint64_t iter, bool leader_update,
                     const NetworkBundle& nets)>
      after_update;
};

// The cross-optimization loop: per cycle, den leader updates via Xi_1 on the
// discrete leader cost, num follower updates via Xi_2 on the discrete
// follower cost; fresh training Brownian minibatch per iteration; evaluation
// appended every eval_interval iterations (plus iteration 0 and the final
// iteration). Deterministic in (config, seed).
TrainResult co_train(const FBSDEControlProblem& problem,
                     const TrainingConfig& config,
                     const TrainHooks& hooks = {});

// Penalty-method baseline: minimizes J_leader + mu * J_follower jointly over
// all parameters with a single optimizer (the leader's config).
TrainResult penalty_train(const FBSDEControlProblem& problem,
                          const TrainingConfig& config, double mu);

// Classical baseline on the forward-only equivalent problem (linear driver
// only): every update is a leader update on the discounted objective.
TrainResult classical_train(const MarketParams& params,
                            const TrainingConfig& config);

struct SweepRow {
  Kappa kappa;
  double inte_mean = 0.0, inte_var = 0.0;
  double para_mean = 0.0, para_var = 0.0;
  double dist_mean = 0.0, dist_var = 0.0;
  std::size_t runs = 0;
  bool has_var = false;  // variance requires >= 2 runs
};

struct SweepResult {
  std::vector<SweepRow> rows;
};

// Trains `runs` seeds (base seed, base seed + 1, ...) per kappa; duplicate
// kappas are dropped, order preserved. Runs execute concurrently up to the
// worker cap; aggregation is fixed-order. When `histories` is given it
// receives every run's history, indexed kappa-major (row r, run k at
// r * runs + k, kappa order as in the result rows).
SweepResult kappa_sweep(const FBSDEControlProblem& problem,
                        const TrainingConfig& base,
                        const std::vector<Kappa>& kappas, std::size_t runs,
                        std::vector<std::vector<TrainingRecord>>* histories
                        = nullptr);

// History CSV: iteration,J_leader,J_follower,inte_y0,para_y0,distance,wall_s
void write_history_csv(const std::vector<TrainingRecord>& history,
                       const std::string& path);
std::vector<TrainingRecord> read_history_csv(const std::string& path);

// Sweep CSV: kappa,metric,mean,var,runs (var empty for single runs)
void write_sweep_csv(const SweepResult& sweep, const std::string& path);

}  // namespace fbsdeco
