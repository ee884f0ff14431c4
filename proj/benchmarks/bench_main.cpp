#include <benchmark/benchmark.h>

#include "fbsdeco/nets.hpp"
#include "fbsdeco/rng.hpp"
#include "fbsdeco/sde.hpp"
#include "fbsdeco/trainer.hpp"

namespace {

using namespace fbsdeco;

void BM_MatmulNT(benchmark::State& state) {
  const std::size_t m = 64, p = 100, q = 100;
  RngStream rng(1, 0);
  Tensor x = Tensor::zeros({m, p});
  Tensor w = Tensor::zeros({q, p});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1, 1);
  for (auto _ : state) {
    Tape tape;
    NodeId out = tape.matmul_nt(tape.constant(x), tape.constant(w));
    benchmark::DoNotOptimize(tape.value(out).data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * m * p * q);
}
BENCHMARK(BM_MatmulNT);

void BM_MlpForward(benchmark::State& state) {
  MLPConfig cfg = default_mlp_config(1, 11, OutputMap::kSoftmax, true, 100);
  ParameterSet params = init_params(cfg, 3);
  params.mode = NetMode::kBatchStats;
  RngStream rng(2, 0);
  Tensor input = Tensor::zeros({64, 2});
  for (std::size_t i = 0; i < input.numel(); ++i) input[i] = rng.uniform(0, 1);
  for (auto _ : state) {
    Tape tape;
    BoundNet net = bind_net(tape, cfg, params);
    NodeId out = mlp_forward(tape, net, tape.constant(input));
    benchmark::DoNotOptimize(tape.value(out).data());
  }
}
BENCHMARK(BM_MlpForward);

void BM_SimulateMarket(benchmark::State& state) {
  FBSDEControlProblem problem = make_problem("paper-market-linear", 10, 0.25);
  NetworkBundle nets = build_bundle(problem, 1);
  TimeGrid grid(0.25, 25);
  BrownianBatch batch = sample_brownian(64, grid, 10, 1, stream_tag::kTrain);
  for (auto _ : state) {
    Tape tape;
    SimResult sim =
        simulate(problem, nets, Y0Source::net(), batch, grid, SimMode::kTrain, tape);
    benchmark::DoNotOptimize(tape.value(sim.traj.x.back()).data());
  }
}
BENCHMARK(BM_SimulateMarket);

void BM_TrainIteration(benchmark::State& state) {
  FBSDEControlProblem problem = make_problem("paper-market-linear", 10, 0.25);
  NetworkBundle nets = build_bundle(problem, 1);
  TimeGrid grid(0.25, 25);
  std::uint64_t draw = 0;
  for (auto _ : state) {
    BrownianBatch batch =
        sample_brownian(64, grid, 10, 1, stream_tag::kTrain + draw++);
    Tape tape;
    SimResult sim =
        simulate(problem, nets, Y0Source::net(), batch, grid, SimMode::kTrain, tape);
    NodeId cost = follower_cost(sim.traj, problem);
    auto grads = tape.backward(cost);
    benchmark::DoNotOptimize(grads.size());
  }
}
BENCHMARK(BM_TrainIteration);

}  // namespace

BENCHMARK_MAIN();
