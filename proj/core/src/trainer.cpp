#include "fbsdeco/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/parallel.hpp"
#include "fbsdeco/rng.hpp"

namespace fbsdeco {

std::string Kappa::str() const {
  if (den == 1) return std::to_string(num);
  return std::to_string(num) + "/" + std::to_string(den);
}

Kappa Kappa::parse(const std::string& text) {
  Kappa k;
  const auto slash = text.find('/');
  try {
    if (slash == std::string::npos) {
      k.num = static_cast<std::uint32_t>(std::stoul(text));
      k.den = 1;
    } else {
      k.num = static_cast<std::uint32_t>(std::stoul(text.substr(0, slash)));
      k.den = static_cast<std::uint32_t>(std::stoul(text.substr(slash + 1)));
    }
  } catch (const std::exception&) {
    throw ContractError("kappa: cannot parse '" + text + "'");
  }
  if (k.num == 0 || k.den == 0)
    throw ContractError("kappa must be a positive rational, got '" + text + "'");
  return k;
}

TrainingConfig::TrainingConfig() {
  leader_opt.learning_rate = 5e-3;
  follower_opt.learning_rate = 1e-3;
}

void TrainingConfig::check(bool has_leader, bool has_follower) const {
  if (kappa.num == 0 || kappa.den == 0)
    throw ContractError("TrainingConfig: kappa must be positive");
  if (m_train < 1 || m_test < 1)
    throw ContractError("TrainingConfig: batch sizes must be >= 1");
  if (time_points < 1)
    throw ContractError("TrainingConfig: need at least one time point");
  if (eval_interval < 1)
    throw ContractError("TrainingConfig: eval interval must be >= 1");
  leader_opt.check();
  follower_opt.check();
  for (const auto& [role, opt] : role_opts) opt.check();
  if (has_leader && has_follower && maxstep % kappa.cycle() != 0)
    throw ContractError("TrainingConfig: maxstep must be divisible by the "
                        "cycle length " + std::to_string(kappa.cycle()));
}

const OptimizerConfig& TrainingConfig::optimizer_for(const std::string& role,
                                                     bool follower_role) const {
  for (const auto& [name, opt] : role_opts)
    if (name == role) return opt;
  return follower_role ? follower_opt : leader_opt;
}

NetworkBundle build_bundle(const FBSDEControlProblem& problem,
                           std::uint64_t seed) {
  NetworkBundle bundle;
  std::uint64_t state = seed ^ 0xa02f7c57u;
  auto next_seed = [&state] { return splitmix64(state); };

  for (const auto& spec : problem.controls) {
    NetworkBundle::Entry e;
    e.role = spec.role;
    e.config = default_mlp_config(problem.state_dim, spec.dim, spec.map,
                                  /*time_input=*/true, spec.hidden_width);
    e.params = init_params(e.config, next_seed());
    bundle.entries.push_back(std::move(e));
  }

  if (problem.backward_dim > 0) {
    // y0 net: its input is the constant x0, so the net degenerates to a
    // trainable m-vector. A single zero-initialized affine over the
    // normalized initial state realizes exactly that: y0 starts at 0 and
    // every coordinate trains at learning-rate speed, for any x0.
    NetworkBundle::Entry y0;
    y0.role = "y0";
    y0.config.input_dim = problem.state_dim;
    y0.config.output_dim = problem.backward_dim;
    y0.config.output_map = OutputMap::kIdentity;
    y0.config.time_input = false;
    y0.params = init_params(y0.config, next_seed());
    for (Tensor& w : y0.params.weights) w.fill(0.0);
    bundle.entries.push_back(std::move(y0));

    NetworkBundle::Entry z;
    z.role = "z";
    z.config = default_mlp_config(problem.state_dim,
                                  problem.backward_dim * problem.noise_dim,
                                  OutputMap::kIdentity, /*time_input=*/true);
    z.params = init_params(z.config, next_seed());
    bundle.entries.push_back(std::move(z));
  }
  return bundle;
}

TrainingRecord evaluate(NetworkBundle& nets, const FBSDEControlProblem& problem,
                        const BrownianBatch& test, const TimeGrid& grid,
                        Precision precision) {
  TrainingRecord rec;
  const std::size_t M = test.paths;
  const std::size_t chunk = std::min<std::size_t>(M, 128);
  double leader_sum = 0.0, follower_sum = 0.0;
  double para = 0.0;
  bool have_para = false;

  for (std::size_t lo = 0; lo < M; lo += chunk) {
    const std::size_t hi = std::min(M, lo + chunk);
    BrownianBatch part;
    part.paths = hi - lo;
    part.steps = test.steps;
    part.dim = test.dim;
    part.seed = test.seed;
    part.stream = test.stream;
    part.incr.assign(test.incr.begin() + lo * test.steps * test.dim,
                     test.incr.begin() + hi * test.steps * test.dim);

    Tape tape(precision);
    SimResult sim = simulate(problem, nets, Y0Source::net(), part, grid,
                             SimMode::kFrozenStats, tape);
    leader_sum +=
        tape.value(tape.sum_all(leader_cost_per_sample(sim.traj, problem, grid)))
            .item();
    if (problem.backward_dim > 0) {
      follower_sum +=
          tape.value(tape.sum_all(follower_cost_per_sample(sim.traj, problem)))
              .item();
      if (!have_para) {
        para = tape.value(sim.traj.y0)[0];
        have_para = true;
      }
    }
  }

  rec.j_leader = leader_sum / static_cast<double>(M);
  rec.j_follower = follower_sum / static_cast<double>(M);
  rec.inte_y0 = problem.report_sign * rec.j_leader;
  rec.para_y0 = para;
  rec.distance = problem.backward_dim > 0 ? std::abs(rec.inte_y0 - rec.para_y0)
                                          : 0.0;
  return rec;
}

bool leader_slot(std::uint64_t iter, const Kappa& kappa, bool leader_first) {
  const std::uint32_t slot = static_cast<std::uint32_t>(iter % kappa.cycle());
  return leader_first ? slot < kappa.den : slot >= kappa.num;
}

namespace {

struct RoleOptimizer {
  OptimizerState state;
};

std::vector<const Tensor*> role_gradients(
    const Tape& tape, const RoleBinding& binding,
    const std::unordered_map<NodeId, Tensor>& grads) {
  std::vector<const Tensor*> out;
  out.reserve(binding.param_end - binding.param_begin);
  for (std::size_t p = binding.param_begin; p < binding.param_end; ++p)
    out.push_back(&grads.at(tape.parameters()[p]));
  return out;
}

enum class LoopKind { kCross, kPenalty };

TrainResult train_loop(const FBSDEControlProblem& problem,
                       const TrainingConfig& config, LoopKind kind, double mu,
                       const TrainHooks& hooks) {
  problem.check();
  const bool has_leader = !problem.controls.empty();
  const bool has_follower = problem.backward_dim > 0;
  if (!has_leader && !has_follower)
    throw ContractError("train: problem has neither controls nor (y0, z)");
  config.check(has_leader, has_follower);

  TrainResult result;
  result.nets = build_bundle(problem, config.seed);
  NetworkBundle& nets = result.nets;
  TimeGrid grid(problem.horizon, config.time_points);
  const BrownianBatch test = sample_brownian(
      config.m_test, grid, problem.noise_dim, config.seed, stream_tag::kTest);

  std::map<std::string, RoleOptimizer> optimizers;
  const auto t_start = std::chrono::steady_clock::now();
  auto wall = [&t_start] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t_start)
        .count();
  };

  {
    TrainingRecord rec = evaluate(nets, problem, test, grid, config.precision);
    rec.iteration = 0;
    rec.wall_s = wall();
    result.history.push_back(rec);
  }

  for (std::uint64_t iter = 0; iter < config.maxstep; ++iter) {
    bool leader_update;
    if (kind == LoopKind::kPenalty) {
      leader_update = true;  // joint update; log slot kept for shape only
    } else if (!has_leader) {
      leader_update = false;
    } else if (!has_follower) {
      leader_update = true;
    } else {
      leader_update = leader_slot(iter, config.kappa, config.leader_first);
    }

    const BrownianBatch batch =
        sample_brownian(config.m_train, grid, problem.noise_dim, config.seed,
                        stream_tag::kTrain + iter);
    Tape tape(config.precision);
    SimResult sim =
        simulate(problem, nets, Y0Source::net(), batch, grid, SimMode::kTrain, tape);

    NodeId cost;
    if (kind == LoopKind::kPenalty) {
      cost = tape.add(leader_cost(sim.traj, problem, grid),
                      tape.scale(follower_cost(sim.traj, problem), mu));
    } else {
      cost = leader_update ? leader_cost(sim.traj, problem, grid)
                           : follower_cost(sim.traj, problem);
    }
    if (!std::isfinite(tape.value(cost).item()))
      throw DivergenceError("training diverged (non-finite cost) at iteration " +
                            std::to_string(iter));

    std::vector<bool> active(tape.parameters().size(), false);
    for (const RoleBinding& b : sim.bindings) {
      const bool update_role = kind == LoopKind::kPenalty
                                   ? true
                                   : (b.is_follower != leader_update);
      if (!update_role) continue;
      for (std::size_t p = b.param_begin; p < b.param_end; ++p) active[p] = true;
    }
    auto grads = tape.backward(cost, active);

    for (const RoleBinding& b : sim.bindings) {
      const bool update_role = kind == LoopKind::kPenalty
                                   ? true
                                   : (b.is_follower != leader_update);
      if (!update_role) continue;
      const OptimizerConfig& opt_cfg =
          (kind == LoopKind::kPenalty)
              ? config.leader_opt
              : config.optimizer_for(b.role, b.is_follower);
      auto gvec = role_gradients(tape, b, grads);
      optim_step(*b.params, gvec, optimizers[b.role].state, opt_cfg,
                 config.precision, b.role + ".");
    }

    result.update_log.push_back(leader_update ? 1 : 0);
    if (hooks.after_update) hooks.after_update(iter, leader_update, nets);

    const std::uint64_t done = iter + 1;
    if (done % config.eval_interval == 0 ||
        (done == config.maxstep && config.maxstep % config.eval_interval != 0)) {
      TrainingRecord rec = evaluate(nets, problem, test, grid, config.precision);
      rec.iteration = done;
      rec.wall_s = wall();
      result.history.push_back(rec);
    }
  }
  return result;
}

}  // namespace

TrainResult co_train(const FBSDEControlProblem& problem,
                     const TrainingConfig& config, const TrainHooks& hooks) {
  return train_loop(problem, config, LoopKind::kCross, 0.0, hooks);
}

TrainResult penalty_train(const FBSDEControlProblem& problem,
                          const TrainingConfig& config, double mu) {
  if (!(mu >= 0.0)) throw ContractError("penalty_train: mu must be >= 0");
  return train_loop(problem, config, LoopKind::kPenalty, mu, {});
}

TrainResult classical_train(const MarketParams& params,
                            const TrainingConfig& config) {
  FBSDEControlProblem problem = classical_equivalent(params);
  return train_loop(problem, config, LoopKind::kCross, 0.0, {});
}

SweepResult kappa_sweep(const FBSDEControlProblem& problem,
                        const TrainingConfig& base,
                        const std::vector<Kappa>& kappas, std::size_t runs,
                        std::vector<std::vector<TrainingRecord>>* histories) {
  if (kappas.empty()) throw ContractError("kappa_sweep: kappa list is empty");
  if (runs < 1) throw ContractError("kappa_sweep: runs must be >= 1");

  std::vector<Kappa> unique;
  for (const Kappa& k : kappas)
    if (std::find(unique.begin(), unique.end(), k) == unique.end())
      unique.push_back(k);

  const std::size_t jobs = unique.size() * runs;
  std::vector<TrainingRecord> terminal(jobs);
  if (histories) histories->assign(jobs, {});
  parallel_for_index(jobs, [&](std::size_t j) {
    TrainingConfig cfg = base;
    cfg.kappa = unique[j / runs];
    cfg.seed = base.seed + (j % runs);
    TrainResult r = co_train(problem, cfg);
    terminal[j] = r.history.back();
    if (histories) (*histories)[j] = std::move(r.history);
  });

  SweepResult sweep;
  for (std::size_t ki = 0; ki < unique.size(); ++ki) {
    SweepRow row;
    row.kappa = unique[ki];
    row.runs = runs;
    row.has_var = runs >= 2;
    auto stats = [&](auto pick, double& mean, double& var) {
      double s = 0.0;
      for (std::size_t r = 0; r < runs; ++r) s += pick(terminal[ki * runs + r]);
      mean = s / static_cast<double>(runs);
      if (runs >= 2) {
        double sq = 0.0;
        for (std::size_t r = 0; r < runs; ++r) {
          const double d = pick(terminal[ki * runs + r]) - mean;
          sq += d * d;
        }
        var = sq / static_cast<double>(runs - 1);
      } else {
        var = 0.0;
      }
    };
    stats([](const TrainingRecord& t) { return t.inte_y0; }, row.inte_mean,
          row.inte_var);
    stats([](const TrainingRecord& t) { return t.para_y0; }, row.para_mean,
          row.para_var);
    stats([](const TrainingRecord& t) { return t.distance; }, row.dist_mean,
          row.dist_var);
    sweep.rows.push_back(row);
  }
  return sweep;
}

void write_history_csv(const std::vector<TrainingRecord>& history,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("write_history_csv: cannot open " + path);
  out << "iteration,J_leader,J_follower,inte_y0,para_y0,distance,wall_s\n";
  char buf[400];
  for (const TrainingRecord& r : history) {
    std::snprintf(buf, sizeof(buf),
                  "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.6f\n",
                  static_cast<unsigned long long>(r.iteration), r.j_leader,
                  r.j_follower, r.inte_y0, r.para_y0, r.distance, r.wall_s);
    out << buf;
  }
}

std::vector<TrainingRecord> read_history_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("read_history_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) ||
      line != "iteration,J_leader,J_follower,inte_y0,para_y0,distance,wall_s")
    throw FormatError("read_history_csv: bad header in " + path);
  std::vector<TrainingRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TrainingRecord r;
    unsigned long long iter = 0;
    if (std::sscanf(line.c_str(), "%llu,%lg,%lg,%lg,%lg,%lg,%lg", &iter,
                    &r.j_leader, &r.j_follower, &r.inte_y0, &r.para_y0,
                    &r.distance, &r.wall_s) != 7)
      throw FormatError("read_history_csv: bad row: " + line);
    r.iteration = iter;
    out.push_back(r);
  }
  return out;
}

void write_sweep_csv(const SweepResult& sweep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("write_sweep_csv: cannot open " + path);
  out << "kappa,metric,mean,var,runs\n";
  char buf[200];
  for (const SweepRow& row : sweep.rows) {
    auto emit = [&](const char* metric, double mean, double var) {
      if (row.has_var) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,%zu\n",
                      row.kappa.str().c_str(), metric, mean, var, row.runs);
      } else {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,,%zu\n",
                      row.kappa.str().c_str(), metric, mean, row.runs);
      }
      out << buf;
    };
    emit("inte_y0", row.inte_mean, row.inte_var);
    emit("para_y0", row.para_mean, row.para_var);
    emit("distance", row.dist_mean, row.dist_var);
  }
}

}  // namespace fbsdeco
