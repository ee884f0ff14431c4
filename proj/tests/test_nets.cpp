#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/nets.hpp"
#include "fbsdeco/rng.hpp"

using namespace fbsdeco;

namespace {

MLPConfig plain_config(std::size_t in, std::vector<std::size_t> hidden,
                       std::size_t out, OutputMap map = OutputMap::kIdentity) {
  MLPConfig c;
  c.input_dim = in;
  c.hidden = std::move(hidden);
  c.output_dim = out;
  c.output_map = map;
  return c;
}

Tensor rnd(RngStream& rng, std::vector<std::size_t> shape, double lo = -1.0,
           double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("init_params is deterministic in the seed") {
  MLPConfig cfg = default_mlp_config(3, 2, OutputMap::kIdentity, true);
  ParameterSet a = init_params(cfg, 42);
  ParameterSet b = init_params(cfg, 42);
  CHECK(a == b);
  ParameterSet c = init_params(cfg, 43);
  CHECK_FALSE(a == c);
}

TEST_CASE("init_params: zero biases, fan-in bound, batchnorm start values") {
  MLPConfig cfg = plain_config(6, {5, 5}, 2);
  cfg.batchnorm = {true, true, false};
  ParameterSet p = init_params(cfg, 7);
  for (const Tensor& b : p.biases)
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(b[i] == 0.0);
  // first layer fan_in = 6 -> bound exactly 1
  for (std::size_t i = 0; i < p.weights[0].numel(); ++i) {
    CHECK(p.weights[0][i] <= 1.0);
    CHECK(p.weights[0][i] >= -1.0);
  }
  CHECK_FALSE(p.bn[0].present());  // no input batchnorm requested
  REQUIRE(p.bn[1].present());      // after the first affine
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(p.bn[1].gamma[i] == 1.0);
    CHECK(p.bn[1].beta[i] == 0.0);
    CHECK(p.bn[1].run_mean[i] == 0.0);
    CHECK(p.bn[1].run_var[i] == 1.0);
  }
  CHECK_FALSE(p.bn[3].present());  // output affine unnormalized here
}

TEST_CASE("mlp_forward: zero parameters give zero (identity) or uniform (softmax)") {
  MLPConfig cfg = plain_config(3, {4}, 5);
  ParameterSet p = init_params(cfg, 1);
  for (auto& w : p.weights) w.fill(0.0);
  Tape tape;
  BoundNet net = bind_net(tape, cfg, p);
  NodeId x = tape.constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  const Tensor& out = tape.value(mlp_forward(tape, net, x));
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.0);

  MLPConfig soft = plain_config(3, {4}, 5, OutputMap::kSoftmax);
  ParameterSet ps = init_params(soft, 1);
  for (auto& w : ps.weights) w.fill(0.0);
  Tape tape2;
  BoundNet net2 = bind_net(tape2, soft, ps);
  NodeId x2 = tape2.constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  const Tensor& out2 = tape2.value(mlp_forward(tape2, net2, x2));
  for (std::size_t i = 0; i < out2.numel(); ++i)
    CHECK(out2[i] == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("generic config follows the width rule: input n+1, hidden n+10") {
  const std::size_t n = 7;
  MLPConfig cfg = default_mlp_config(n, 3, OutputMap::kIdentity, true);
  CHECK(cfg.input_dim == n + 1);
  REQUIRE(cfg.hidden.size() == 3);
  for (std::size_t w : cfg.hidden) CHECK(w == n + 10);
  CHECK(cfg.depth() == 4);
  // batchnorm on hidden layers, not after the output affine
  CHECK(cfg.bn_at(0));
  CHECK(cfg.bn_at(2));
  CHECK_FALSE(cfg.bn_at(3));
}

TEST_CASE("train-mode batchnorm requires batch >= 2") {
  MLPConfig cfg = plain_config(2, {3}, 1);
  cfg.batchnorm = {true, false};
  ParameterSet p = init_params(cfg, 3);
  p.mode = NetMode::kTrain;
  Tape tape;
  BoundNet net = bind_net(tape, cfg, p);
  NodeId x = tape.constant(Tensor::from({1, 2}, {1.0, 2.0}));
  CHECK_THROWS_AS(mlp_forward(tape, net, x), ContractError);
  p.mode = NetMode::kEval;
  Tape tape2;
  BoundNet net2 = bind_net(tape2, cfg, p);
  NodeId x2 = tape2.constant(Tensor::from({1, 2}, {1.0, 2.0}));
  CHECK_NOTHROW(mlp_forward(tape2, net2, x2));
}

TEST_CASE("batchnorm_forward worked examples") {
  SUBCASE("identical rows normalize to the shift vector") {
    BatchNormState st;
    st.gamma = Tensor::from({2}, {3.0, 4.0});
    st.beta = Tensor::from({2}, {0.7, -0.2});
    st.run_mean = Tensor::zeros({2});
    st.run_var = Tensor::full({2}, 1.0);
    Tape tape;
    NodeId g = tape.parameter(st.gamma);
    NodeId b = tape.parameter(st.beta);
    NodeId x = tape.constant(Tensor::from({3, 2}, {5, 9, 5, 9, 5, 9}));
    NodeId out = batchnorm_forward(tape, st, g, b, x, NetMode::kTrain, 1e-6, 0.99);
    const Tensor& v = tape.value(out);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(v[i * 2 + 0] == doctest::Approx(0.7).epsilon(1e-14));
      CHECK(v[i * 2 + 1] == doctest::Approx(-0.2).epsilon(1e-14));
    }
    // running stats pulled toward the batch stats with momentum 0.99
    CHECK(st.run_mean[0] == doctest::Approx(0.01 * 5.0).epsilon(1e-12));
    CHECK(st.run_var[0] == doctest::Approx(0.99 * 1.0).epsilon(1e-12));
  }
  SUBCASE("eval mode with unit running stats is the identity") {
    BatchNormState st;
    st.gamma = Tensor::full({1}, 1.0);
    st.beta = Tensor::zeros({1});
    st.run_mean = Tensor::zeros({1});
    st.run_var = Tensor::full({1}, 1.0);
    Tape tape;
    NodeId g = tape.parameter(st.gamma);
    NodeId b = tape.parameter(st.beta);
    NodeId x = tape.constant(Tensor::from({2, 1}, {1.25, -0.5}));
    NodeId out = batchnorm_forward(tape, st, g, b, x, NetMode::kEval, 1e-6, 0.99);
    CHECK(tape.value(out)[0] == doctest::Approx(1.25).epsilon(1e-6));
    CHECK(tape.value(out)[1] == doctest::Approx(-0.5).epsilon(1e-6));
  }
  SUBCASE("train column [0, 2]: population variance 1.0, eps-perturbed") {
    BatchNormState st;
    st.gamma = Tensor::from({1}, {2.0});
    st.beta = Tensor::from({1}, {0.5});
    st.run_mean = Tensor::zeros({1});
    st.run_var = Tensor::full({1}, 1.0);
    Tape tape;
    NodeId g = tape.parameter(st.gamma);
    NodeId b = tape.parameter(st.beta);
    NodeId x = tape.constant(Tensor::from({2, 1}, {0.0, 2.0}));
    NodeId out = batchnorm_forward(tape, st, g, b, x, NetMode::kTrain, 1e-6, 0.99);
    // hand evaluation: mean 1, population var 1, xhat = -/+ 1/sqrt(1+1e-6)
    const double xhat = 1.0 / std::sqrt(1.0 + 1e-6);
    CHECK(tape.value(out)[0] == doctest::Approx(0.5 - 2.0 * xhat).epsilon(1e-14));
    CHECK(tape.value(out)[1] == doctest::Approx(0.5 + 2.0 * xhat).epsilon(1e-14));
  }
}

TEST_CASE("output_softmax worked examples") {
  Tensor a = output_softmax(Tensor::from({1, 2}, {0.0, 0.0}));
  CHECK(a[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor b = output_softmax(Tensor::from({1, 2}, {1000.0, 0.0}));
  CHECK(b[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(b[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(b.all_finite());

  Tensor c = output_softmax(Tensor::from({1, 2}, {std::log(2.0), 0.0}));
  CHECK(c[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(c[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("output_nonneg worked examples") {
  Tensor a = output_nonneg(Tensor::from({1, 2}, {-1.0, 2.0}));
  CHECK(a[0] == 0.0);
  CHECK(a[1] == 2.0);
  Tensor z = output_nonneg(Tensor::zeros({2, 2}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(z[i] == 0.0);
  Tensor nz = output_nonneg(Tensor::from({1, 1}, {-0.0}));
  CHECK(nz[0] == 0.0);
  CHECK_FALSE(std::signbit(nz[0]));
}

TEST_CASE("softmax rows stay on the simplex for extreme logits") {
  RngStream rng(5, 2);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor logits = rnd(rng, {4, 7}, -40.0, 40.0);
    Tensor pi = output_softmax(logits);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(pi[r * 7 + j] >= 0.0);
        CHECK(pi[r * 7 + j] <= 1.0);
        sum += pi[r * 7 + j];
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("eval-mode forward is a pure function; batch permutation equivariance") {
  MLPConfig cfg = plain_config(3, {6, 6}, 2);  // batchnorm off
  ParameterSet p = init_params(cfg, 11);
  p.mode = NetMode::kEval;
  RngStream rng(3, 3);
  Tensor x = rnd(rng, {4, 3});

  auto forward = [&](const Tensor& input) {
    Tape tape;
    BoundNet net = bind_net(tape, cfg, p);
    return tape.value(mlp_forward(tape, net, tape.constant(input)));
  };
  CHECK(forward(x) == forward(x));

  // swap rows 1 and 3 of the input: outputs swap the same way
  Tensor xp = x;
  for (std::size_t j = 0; j < 3; ++j) std::swap(xp[1 * 3 + j], xp[3 * 3 + j]);
  Tensor a = forward(x), b = forward(xp);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(a[1 * 2 + j] == b[3 * 2 + j]);
    CHECK(a[3 * 2 + j] == b[1 * 2 + j]);
    CHECK(a[0 * 2 + j] == b[0 * 2 + j]);
  }
}

TEST_CASE("net_forward_tx concatenates the normalized time column") {
  MLPConfig cfg = plain_config(3, {4}, 1);  // 2 state dims + time
  cfg.time_input = true;
  ParameterSet p = init_params(cfg, 2);
  p.mode = NetMode::kEval;
  Tape tape;
  BoundNet net = bind_net(tape, cfg, p);
  NodeId x = tape.constant(Tensor::from({2, 2}, {1, 2, 3, 4}));
  NodeId out = net_forward_tx(tape, net, 0.25, x);
  CHECK(tape.value(out).dim(0) == 2);
  CHECK(tape.value(out).dim(1) == 1);
}

TEST_CASE("checkpoint round trip and corruption reporting") {
  NetworkBundle bundle;
  {
    NetworkBundle::Entry e;
    e.role = "pi";
    e.config = default_mlp_config(2, 4, OutputMap::kSoftmax, true, 8);
    e.params = init_params(e.config, 21);
    bundle.entries.push_back(std::move(e));
    NetworkBundle::Entry z;
    z.role = "z";
    z.config = default_mlp_config(2, 3, OutputMap::kIdentity, true);
    z.params = init_params(z.config, 22);
    bundle.entries.push_back(std::move(z));
  }
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "fbsdeco_nets").string();
  fs::create_directories(dir);
  const std::string path = dir + "/bundle.ckpt";
  save_bundle(bundle, path);
  NetworkBundle loaded = load_bundle(path);
  REQUIRE(loaded.entries.size() == 2);
  CHECK(loaded.entries[0].role == "pi");
  CHECK(loaded.entries[0].params == bundle.entries[0].params);
  CHECK(loaded.entries[1].params == bundle.entries[1].params);
  CHECK(loaded.entries[0].config.output_map == OutputMap::kSoftmax);

  // truncate the payload: the loader must name the tensor it choked on
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string blob = ss.str();
  blob.resize(blob.size() - 64);
  const std::string bad = dir + "/truncated.ckpt";
  std::ofstream(bad, std::ios::binary) << blob;
  try {
    load_bundle(bad);
    FAIL("truncated checkpoint was accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("z/") != std::string::npos);
  }
}

TEST_CASE("missing role lookup names the role") {
  NetworkBundle bundle;
  CHECK_THROWS_WITH_AS(bundle.at("pi"),
                       "NetworkBundle: missing role 'pi'", ContractError);
}
