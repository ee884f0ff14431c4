#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/experiment.hpp"
#include "fbsdeco/rng.hpp"

namespace fbsdeco {

namespace {

Tensor random_tensor(RngStream& rng, std::vector<std::size_t> shape,
                     double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Keeps relu/softmax inputs away from their kinks.
void push_from_zero(Tensor& t, double margin) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (std::abs(t[i]) < margin) t[i] = t[i] < 0.0 ? -margin : margin;
}

double op_gradient_sweep(std::size_t trials, std::uint64_t seed) {
  RngStream rng(seed, 99);
  double worst = 0.0;
  auto check = [&](const std::function<NodeId(Tape&, NodeId)>& build,
                   const Tensor& point) {
    worst = std::max(worst, grad_check(build, point, 1e-6));
  };

  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t m = 2 + trial % 3;
    const std::size_t q = 3 + trial % 2;

    Tensor a = random_tensor(rng, {m, q});
    Tensor b = random_tensor(rng, {m, q});
    Tensor col = random_tensor(rng, {m, 1});
    Tensor w = random_tensor(rng, {q, q});
    Tensor bias = random_tensor(rng, {q});
    Tensor vec = random_tensor(rng, {q});
    Tensor cube = random_tensor(rng, {m, 2, q});
    Tensor dvec = random_tensor(rng, {m, q});
    Tensor relu_in = a;
    push_from_zero(relu_in, 1e-3);

    auto wrap_const = [](Tensor c) {
      return [c = std::move(c)](Tape& t) { return t.constant(c); };
    };
    auto cb = wrap_const(b);
    auto ccol = wrap_const(col);
    auto cw = wrap_const(w);
    auto cbias = wrap_const(bias);
    auto cvec = wrap_const(vec);
    auto ccube = wrap_const(cube);
    auto cdvec = wrap_const(dvec);

    check([&](Tape& t, NodeId p) { return t.sum_all(t.add(p, cb(t))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.sub(p, cb(t))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.mul(p, cb(t))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.mul(p, cb(t))); }, col);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.mul(ccol(t), p)); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.scale(p, -1.7)); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.add_scalar(p, 0.9)); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.matmul(p, cvec(t))); }, w);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.matmul(cw(t), p)); }, vec);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.matmul(p, cw(t))));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.matmul_nt(p, cw(t))));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.matmul_nt(cb(t), p)));
    }, w);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.add_rows(p, cbias(t))); }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.add_rows(cb(t), p)));
    }, bias);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.bmv(p, cdvec(t))));
    }, cube);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.bmv(ccube(t), p)));
    }, dvec);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(p)); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.exp(t.scale(p, 0.5))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.relu(p)); }, relu_in);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.softmax(p)));
    }, a);
    check([&](Tape& t, NodeId p) { return t.mean_all(t.square(p)); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.row_sum(p))); }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.concat_cols(p, cb(t))));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.slice_cols(p, 1, 3)));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.reshape(p, {q, m})));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.repeat_rows(p, 5)));
    }, vec);
    // batchnorm train: a random elementwise weight breaks the
    // normalization invariance so the input gradient is O(1)
    {
      Tensor gamma = random_tensor(rng, {q}, 0.5, 1.5);
      Tensor beta = random_tensor(rng, {q});
      Tensor wide = random_tensor(rng, {8, q});
      Tensor mask = random_tensor(rng, {8, q});
      push_from_zero(wide, 0.1);
      push_from_zero(mask, 0.1);
      auto cg = wrap_const(gamma);
      auto cbeta = wrap_const(beta);
      auto cwide = wrap_const(wide);
      auto cmask = wrap_const(mask);
      check([&](Tape& t, NodeId p) {
        return t.sum_all(t.square(
            t.mul(cmask(t), t.batchnorm_train(p, cg(t), cbeta(t), 1e-6))));
      }, wide);
      check([&](Tape& t, NodeId p) {
        return t.sum_all(t.square(
            t.mul(cmask(t), t.batchnorm_train(cwide(t), p, cbeta(t), 1e-6))));
      }, gamma);
      Tensor rm = random_tensor(rng, {q});
      Tensor rv = random_tensor(rng, {q}, 0.5, 2.0);
      check([&](Tape& t, NodeId p) {
        return t.sum_all(
            t.square(t.batchnorm_eval(p, cg(t), cbeta(t), 1e-6, rm, rv)));
      }, a);
    }
  }
  return worst;
}

NetworkBundle tiny_instance_bundle(const FBSDEControlProblem& problem,
                                   std::uint64_t seed) {
  NetworkBundle bundle;
  RngStream rng(seed, 4);
  auto plain = [&](const std::string& role, std::size_t in, std::size_t out,
                   bool time_input) {
    NetworkBundle::Entry e;
    e.role = role;
    e.config.input_dim = in + (time_input ? 1 : 0);
    e.config.hidden = {4, 4, 4};
    e.config.output_dim = out;
    e.config.time_input = time_input;
    e.config.batchnorm.clear();  // batchnorm off
    e.params = init_params(e.config, seed + bundle.entries.size());
    // zero biases put relu kinks exactly at the evaluation point whenever a
    // whole layer is inactive; displace them so central differences do not
    // straddle a kink
    for (Tensor& b : e.params.biases)
      for (std::size_t i = 0; i < b.numel(); ++i) b[i] = rng.uniform(0.05, 0.4);
    bundle.entries.push_back(std::move(e));
  };
  plain("u", problem.state_dim, 2, true);
  plain("y0", problem.state_dim, 1, false);
  plain("z", problem.state_dim,
        problem.backward_dim * problem.noise_dim, true);
  return bundle;
}

}  // namespace

double tiny_instance_grad_error(bool leader_objective, Precision precision) {
  FBSDEControlProblem problem = tiny_coupled_problem();
  NetworkBundle bundle = tiny_instance_bundle(problem, 11);
  TimeGrid grid(problem.horizon, 4);
  const BrownianBatch batch = sample_brownian(2, grid, problem.noise_dim, 5, 1);

  auto objective = [&](NetworkBundle& nets) {
    Tape tape(precision);
    SimResult sim = simulate(problem, nets, Y0Source::net(), batch, grid,
                             SimMode::kTrain, tape);
    NodeId cost = leader_objective ? leader_cost(sim.traj, problem, grid)
                                   : follower_cost(sim.traj, problem);
    return tape.value(cost).item();
  };

  // analytic gradients for every role
  Tape tape(precision);
  SimResult sim = simulate(problem, bundle, Y0Source::net(), batch, grid,
                           SimMode::kTrain, tape);
  NodeId cost = leader_objective ? leader_cost(sim.traj, problem, grid)
                                 : follower_cost(sim.traj, problem);
  auto grads = tape.backward(cost);

  const double h = 1e-6;
  double worst = 0.0;
  for (const RoleBinding& binding : sim.bindings) {
    auto named = binding.params->trainable();
    for (std::size_t p = binding.param_begin; p < binding.param_end; ++p) {
      const Tensor& analytic = grads.at(tape.parameters()[p]);
      Tensor* theta = named[p - binding.param_begin].tensor;
      for (std::size_t i = 0; i < theta->numel(); ++i) {
        const double keep = (*theta)[i];
        (*theta)[i] = keep + h;
        const double up = objective(bundle);
        (*theta)[i] = keep - h;
        const double dn = objective(bundle);
        (*theta)[i] = keep;
        const double numeric = (up - dn) / (2.0 * h);
        const double denom =
            std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
      }
    }
  }
  return worst;
}

std::vector<VerifyItem> verify_suite(Precision precision) {
  std::vector<VerifyItem> items;
  auto run = [&](const std::string& name, const std::function<std::string()>& fn) {
    VerifyItem item;
    item.name = name;
    try {
      item.detail = fn();
      item.status = VerifyItem::Status::kPass;
    } catch (const std::exception& e) {
      item.status = VerifyItem::Status::kFail;
      item.detail = e.what();
    }
    items.push_back(std::move(item));
  };
  auto skip = [&](const std::string& name, const std::string& why) {
    items.push_back({name, VerifyItem::Status::kSkip, why});
  };

  if (precision == Precision::f32) {
    skip("op-gradients", "gradient checks need 64-bit mode");
    skip("objective-gradients", "gradient checks need 64-bit mode");
  } else {
    run("op-gradients", [&] {
      const double worst = op_gradient_sweep(8, 2024);
      if (worst >= 1e-5)
        throw ContractError("max op gradient error " + std::to_string(worst));
      char buf[64];
      std::snprintf(buf, sizeof(buf), "max rel err %.3g", worst);
      return std::string(buf);
    });
    run("objective-gradients", [&] {
      const double worst = std::max(tiny_instance_grad_error(true),
                                    tiny_instance_grad_error(false));
      if (worst >= 1e-4)
        throw ContractError("max objective gradient error " +
                            std::to_string(worst));
      char buf[64];
      std::snprintf(buf, sizeof(buf), "max rel err %.3g", worst);
      return std::string(buf);
    });
  }

  run("analytic-oracle", [&] {
    AnalyticFollowOnly an = analytic_followonly_problem(3, 1.0);
    // z net pinned to the exact all-ones row: zero weights, final bias 1
    NetworkBundle nets = build_bundle(an.problem, 4);
    ParameterSet& z = nets.at("z").params;
    for (auto& w : z.weights) w.fill(0.0);
    for (auto& b : z.biases) b.fill(0.0);
    z.biases.back().fill(1.0);
    TimeGrid grid(1.0, 25);
    const BrownianBatch batch = sample_brownian(64, grid, 3, 9, 0);
    Tape tape(precision);
    SimResult sim =
        simulate(an.problem, nets, Y0Source::value(Tensor::from({1}, {0.0})),
                 batch, grid, SimMode::kEval, tape);
    const double cost = tape.value(follower_cost(sim.traj, an.problem)).item();
    // the residual is pure summation-order roundoff: double vs float scale
    const double tol = precision == Precision::f32 ? 1e-9 : 1e-22;
    if (!(cost < tol))
      throw ContractError("exact solution leaves follower cost " +
                          std::to_string(cost));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "follower cost %.3g at exact (y0, z)", cost);
    return std::string(buf);
  });

  run("schedule-exactness", [&] {
    FBSDEControlProblem problem = tiny_coupled_problem();
    TrainingConfig cfg;
    cfg.kappa = {19, 1};
    cfg.maxstep = 200;
    cfg.m_train = 4;
    cfg.m_test = 8;
    cfg.time_points = 3;
    cfg.eval_interval = 100;
    cfg.precision = precision;
    TrainResult r = co_train(problem, cfg);
    std::size_t leader = 0;
    for (std::uint8_t u : r.update_log) leader += u;
    if (leader != 10 || r.update_log.size() != 200)
      throw ContractError("kappa=19, maxstep=200 gave " +
                          std::to_string(leader) + " leader updates");
    cfg.kappa = {1, 4};
    cfg.maxstep = 20;
    TrainResult r2 = co_train(problem, cfg);
    // cycle of 5: leader,leader,leader,leader,follower
    for (std::size_t i = 0; i < r2.update_log.size(); ++i) {
      const bool expect_leader = (i % 5) < 4;
      if ((r2.update_log[i] == 1) != expect_leader)
        throw ContractError("kappa=1/4 cycle broken at iteration " +
                            std::to_string(i));
    }
    return std::string("10/190 split at kappa=19; 4:1 cycle at kappa=1/4");
  });

  run("simplex-invariants", [&] {
    RngStream rng(77, 0);
    for (int trial = 0; trial < 200; ++trial) {
      Tensor logits = random_tensor(rng, {4, 11}, -30.0, 30.0);
      Tensor pi = output_softmax(logits);
      for (std::size_t row = 0; row < 4; ++row) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 11; ++j) {
          const double v = pi[row * 11 + j];
          if (v < 0.0 || v > 1.0)
            throw ContractError("softmax output left [0,1]");
          sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-12)
          throw ContractError("softmax row sum off by " +
                              std::to_string(sum - 1.0));
      }
      Tensor c = output_nonneg(random_tensor(rng, {8, 1}, -5.0, 5.0));
      for (std::size_t i = 0; i < c.numel(); ++i)
        if (c[i] < 0.0) throw ContractError("nonneg map emitted a negative");
    }
    return std::string("200 random batches on the simplex");
  });

  run("determinism", [&] {
    AnalyticFollowOnly an = analytic_followonly_problem(2, 1.0);
    TrainingConfig cfg;
    cfg.maxstep = 40;
    cfg.m_train = 8;
    cfg.m_test = 16;
    cfg.time_points = 5;
    cfg.eval_interval = 10;
    cfg.precision = precision;
    TrainResult a = co_train(an.problem, cfg);
    TrainResult b = co_train(an.problem, cfg);
    if (a.history.size() != b.history.size())
      throw ContractError("history lengths differ");
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      const TrainingRecord &x = a.history[i], &y = b.history[i];
      if (x.iteration != y.iteration || x.j_leader != y.j_leader ||
          x.j_follower != y.j_follower || x.inte_y0 != y.inte_y0 ||
          x.para_y0 != y.para_y0 || x.distance != y.distance)
        throw ContractError("histories diverge at record " + std::to_string(i));
    }
    return std::string("two runs, bit-identical metrics");
  });

  run("checkpoint-format", [&] {
    FBSDEControlProblem problem = tiny_coupled_problem();
    NetworkBundle nets = build_bundle(problem, 13);
    const std::string dir =
        (std::filesystem::temp_directory_path() / "fbsdeco_verify").string();
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/ckpt.bin";
    save_bundle(nets, path);
    NetworkBundle loaded = load_bundle(path);
    for (std::size_t i = 0; i < nets.entries.size(); ++i)
      if (!(loaded.entries[i].params == nets.entries[i].params))
        throw ContractError("round-trip changed parameters");
    // corrupt one tensor header line and expect a format error naming it
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string blob = ss.str();
    const std::string needle = "tensor u w1 2";
    const auto pos = blob.find(needle);
    if (pos == std::string::npos)
      throw ContractError("expected header line missing");
    blob[pos + needle.size() + 1] = '9';  // break the shape
    const std::string bad = dir + "/ckpt_bad.bin";
    std::ofstream outf(bad, std::ios::binary);
    outf << blob;
    outf.close();
    try {
      load_bundle(bad);
      throw ContractError("corrupted checkpoint was accepted");
    } catch (const FormatError& e) {
      if (std::string(e.what()).find("u/w1") == std::string::npos)
        throw ContractError(std::string("format error does not name the "
                                        "offending layer: ") + e.what());
    }
    return std::string("round-trip exact; corruption names u/w1");
  });

  return items;
}

int run_verify(std::ostream& out, Precision precision) {
  const auto items = verify_suite(precision);
  bool ok = true;
  for (const VerifyItem& item : items) {
    const char* status = item.status == VerifyItem::Status::kPass   ? "PASS"
                         : item.status == VerifyItem::Status::kSkip ? "SKIP"
                                                                    : "FAIL";
    out << status << " " << item.name;
    if (!item.detail.empty()) out << " - " << item.detail;
    out << "\n";
    if (item.status == VerifyItem::Status::kFail) ok = false;
  }
  out << (ok ? "verify: all properties hold\n" : "verify: FAILURES above\n");
  return ok ? 0 : 1;
}

}  // namespace fbsdeco
