#include <doctest.h>

#include <cmath>
#include <functional>

#include "fbsdeco/errors.hpp"
#include "fbsdeco/rng.hpp"
#include "fbsdeco/tape.hpp"

using namespace fbsdeco;

namespace {

Tensor rnd(RngStream& rng, std::vector<std::size_t> shape, double lo = -1.0,
           double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

void away_from_zero(Tensor& t, double margin) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (std::abs(t[i]) < margin) t[i] = t[i] < 0.0 ? -margin : margin;
}

}  // namespace

TEST_CASE("record: elementwise add of 2-vectors") {
  Tape tape;
  NodeId a = tape.constant(Tensor::from({2}, {1.0, 2.0}));
  NodeId b = tape.constant(Tensor::from({2}, {10.0, 20.0}));
  NodeId c = tape.add(a, b);
  CHECK(tape.value(c)[0] == 11.0);
  CHECK(tape.value(c)[1] == 22.0);
}

TEST_CASE("record: matrix-vector multiply and its shape rule") {
  Tape tape;
  NodeId w = tape.constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  NodeId x3 = tape.constant(Tensor::from({3}, {1.0, 0.0, -1.0}));
  NodeId y = tape.matmul(w, x3);
  CHECK(tape.value(y).shape() == std::vector<std::size_t>{2});
  CHECK(tape.value(y)[0] == doctest::Approx(-2.0));
  CHECK(tape.value(y)[1] == doctest::Approx(-2.0));

  NodeId x4 = tape.constant(Tensor::zeros({4}));
  CHECK_THROWS_AS(tape.matmul(w, x4), ShapeError);
}

TEST_CASE("tape is a DAG: inputs precede their node") {
  Tape tape;
  NodeId a = tape.parameter(Tensor::from({2}, {1.0, 2.0}));
  NodeId b = tape.square(a);
  NodeId c = tape.add(a, b);
  for (NodeId id = 0; id < tape.size(); ++id)
    for (NodeId in : tape.node(id).in)
      if (in != kNoNode) CHECK(in < id);
  CHECK(c == tape.size() - 1);
}

TEST_CASE("backward: p^2 at p=3 gives 6") {
  Tape tape;
  NodeId p = tape.parameter(Tensor::scalar(3.0));
  NodeId root = tape.sum_all(tape.square(p));
  auto grads = tape.backward(root);
  CHECK(grads.at(p)[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward: sum of softmax has zero gradient") {
  Tape tape;
  NodeId p = tape.parameter(Tensor::scalar(1.0));
  NodeId both = tape.concat_cols(tape.reshape(p, {1, 1}),
                                 tape.constant(Tensor::zeros({1, 1})));
  NodeId root = tape.sum_all(tape.softmax(both));
  CHECK(tape.value(root).item() == doctest::Approx(1.0).epsilon(1e-15));
  auto grads = tape.backward(root);
  CHECK(std::abs(grads.at(p)[0]) < 1e-15);
}

TEST_CASE("backward requires a scalar root") {
  Tape tape;
  NodeId p = tape.parameter(Tensor::from({2}, {1.0, 2.0}));
  NodeId q = tape.square(p);
  CHECK_THROWS_AS(tape.backward(q), ContractError);
}

TEST_CASE("backward: 3-layer MLP loss matches central differences") {
  // weights flattened into one parameter tensor; builds w -> loss
  const std::size_t in = 3, h = 4, out = 2, batch = 2;
  const std::size_t n_param = h * in + h + h * h + h + out * h + out;
  RngStream rng(31, 0);
  Tensor theta = rnd(rng, {n_param}, -0.7, 0.7);
  Tensor input = rnd(rng, {batch, in});

  auto build = [&](Tape& t, NodeId p) {
    std::uint32_t off = 0;
    auto take = [&](std::size_t r, std::size_t c) {
      NodeId flat = t.slice_cols(t.reshape(p, {1, n_param}), off,
                                 off + static_cast<std::uint32_t>(r * c));
      off += static_cast<std::uint32_t>(r * c);
      return c == 1 ? t.reshape(flat, {r}) : t.reshape(flat, {r, c});
    };
    NodeId w1 = take(h, in), b1 = take(h, 1);
    NodeId w2 = take(h, h), b2 = take(h, 1);
    NodeId w3 = take(out, h), b3 = take(out, 1);
    NodeId x = t.constant(input);
    NodeId h1 = t.relu(t.add_rows(t.matmul_nt(x, w1), b1));
    NodeId h2 = t.relu(t.add_rows(t.matmul_nt(h1, w2), b2));
    NodeId o = t.add_rows(t.matmul_nt(h2, w3), b3);
    return t.mean_all(t.square(o));
  };
  CHECK(grad_check(build, theta, 1e-6) < 1e-5);
}

TEST_CASE("grad_check worked examples") {
  SUBCASE("f(x) = x . x") {
    auto build = [](Tape& t, NodeId p) { return t.sum_all(t.square(p)); };
    CHECK(grad_check(build, Tensor::from({3}, {1, 2, 3}), 1e-6) < 1e-7);
  }
  SUBCASE("f(x) = sum relu(x), kink avoided") {
    auto build = [](Tape& t, NodeId p) { return t.sum_all(t.relu(p)); };
    CHECK(grad_check(build, Tensor::from({2}, {1.0, -1.0}), 1e-6) < 1e-7);
  }
  SUBCASE("f(x) = exp(x1) at 0, analytic slope 1") {
    auto build = [](Tape& t, NodeId p) { return t.sum_all(t.exp(p)); };
    CHECK(grad_check(build, Tensor::from({1}, {0.0}), 1e-6) < 1e-7);
    Tape t;
    NodeId p = t.parameter(Tensor::from({1}, {0.0}));
    auto grads = t.backward(t.sum_all(t.exp(p)));
    CHECK(grads.at(p)[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("non-positive step is rejected") {
    auto build = [](Tape& t, NodeId p) { return t.sum_all(p); };
    CHECK_THROWS_AS(grad_check(build, Tensor::scalar(1.0), 0.0), ContractError);
  }
}

TEST_CASE("every op matches the central-difference oracle on random inputs") {
  RngStream rng(2718, 5);
  double worst = 0.0;
  auto check = [&](const std::function<NodeId(Tape&, NodeId)>& build,
                   const Tensor& point) {
    worst = std::max(worst, grad_check(build, point, 1e-6));
  };

  // magnitudes in [0.1, 1] keep every true gradient well above the
  // finite-difference noise floor
  auto rnd_signed = [&](std::vector<std::size_t> shape) {
    Tensor t = rnd(rng, std::move(shape), 0.1, 1.0);
    for (std::size_t i = 0; i < t.numel(); ++i)
      if (rng.uniform() < 0.5) t[i] = -t[i];
    return t;
  };

  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 2 + trial % 3, q = 3 + trial % 3;
    Tensor a = rnd_signed({m, q});
    Tensor b = rnd_signed({m, q});
    Tensor col = rnd_signed({m, 1});
    Tensor w = rnd_signed({q, q});
    Tensor bias = rnd_signed({q});
    Tensor cube = rnd_signed({m, 2, q});
    Tensor dvec = rnd_signed({m, q});
    Tensor relu_in = a;
    away_from_zero(relu_in, 1e-3);
    Tensor gamma = rnd(rng, {q}, 0.5, 1.5);
    Tensor beta = rnd(rng, {q});

    auto K = [](Tensor c) {
      return [c = std::move(c)](Tape& t) { return t.constant(c); };
    };
    auto Cb = K(b), Ccol = K(col), Cw = K(w), Cbias = K(bias), Ccube = K(cube),
         Cdv = K(dvec), Cg = K(gamma), Cbt = K(beta);

    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.add(p, Cb(t)))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.add(p, Cb(t)))); }, col);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.sub(p, Cb(t)))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.mul(p, Cb(t)))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.mul(p, Cb(t)))); }, col);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.mul(Ccol(t), p))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.scale(p, -1.3))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.add_scalar(p, 0.4))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.matmul(p, Cbias(t)))); }, w);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.matmul(Cw(t), p))); }, bias);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.matmul(p, Cw(t)))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.matmul_nt(p, Cw(t)))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.matmul_nt(Cb(t), p))); }, w);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.add_rows(p, Cbias(t)))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.add_rows(Cb(t), p))); }, bias);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.bmv(p, Cdv(t)))); }, cube);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.bmv(Ccube(t), p))); }, dvec);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.square(p))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.exp(t.scale(p, 0.7))); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.relu(p))); }, relu_in);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.softmax(p))); }, a);
    check([&](Tape& t, NodeId p) { return t.mean_all(t.square(p)); }, a);
    check([&](Tape& t, NodeId p) { return t.sum_all(t.square(t.row_sum(p))); }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.concat_cols(p, Cb(t))));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.concat_cols(Cb(t), p)));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.slice_cols(p, 1, 3)));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.reshape(p, {q, m})));
    }, a);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(t.repeat_rows(p, 4)));
    }, bias);
    // a plain sum of squares of batchnorm output is invariant to the input
    // up to epsilon terms (sum xhat = 0, sum xhat^2 = M - eps scale), so a
    // random per-element weight breaks the symmetry before squaring
    Tensor wide = rnd_signed({8, q});
    Tensor mask = rnd_signed({8, q});
    auto Cwide = K(wide);
    auto Cmask = K(mask);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(
          t.mul(Cmask(t), t.batchnorm_train(p, Cg(t), Cbt(t), 1e-6))));
    }, wide);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(
          t.mul(Cmask(t), t.batchnorm_train(Cwide(t), p, Cbt(t), 1e-6))));
    }, gamma);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(t.square(
          t.mul(Cmask(t), t.batchnorm_train(Cwide(t), Cg(t), p, 1e-6))));
    }, beta);
    Tensor rm = rnd(rng, {q});
    Tensor rv = rnd(rng, {q}, 0.5, 2.0);
    check([&](Tape& t, NodeId p) {
      return t.sum_all(
          t.square(t.batchnorm_eval(p, Cg(t), Cbt(t), 1e-6, rm, rv)));
    }, a);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("backward is deterministic: identical tapes, bit-identical grads") {
  auto run = [] {
    Tape tape;
    RngStream rng(9, 9);
    NodeId p = tape.parameter(rnd(rng, {3, 4}));
    NodeId w = tape.constant(rnd(rng, {4, 4}));
    NodeId root = tape.mean_all(
        tape.square(tape.softmax(tape.matmul_nt(tape.relu(p), w))));
    return tape.backward(root).begin()->second;
  };
  Tensor g1 = run(), g2 = run();
  CHECK(g1 == g2);
}

TEST_CASE("chain rule composes across separately recorded Jacobian actions") {
  // f: R^2 -> R^2, f(x) = (x0*x1, x0+x1); g(v) = v0^2 + 3 v1
  const Tensor x0 = Tensor::from({1, 2}, {1.3, -0.7});

  // route 1: one tape end to end
  Tape tape;
  NodeId p = tape.parameter(x0);
  NodeId f0 = tape.mul(tape.slice_cols(p, 0, 1), tape.slice_cols(p, 1, 2));
  NodeId f1 = tape.add(tape.slice_cols(p, 0, 1), tape.slice_cols(p, 1, 2));
  NodeId g = tape.add(tape.sum_all(tape.square(f0)),
                      tape.scale(tape.sum_all(f1), 3.0));
  Tensor direct = tape.backward(g).at(p);

  // route 2: rows of Jf via separate tapes, then dg/dv . Jf
  const double v0 = x0[0] * x0[1];
  const double dg_dv[2] = {2.0 * v0, 3.0};
  double composed[2] = {0.0, 0.0};
  for (int row = 0; row < 2; ++row) {
    Tape tf;
    NodeId q = tf.parameter(x0);
    NodeId c0 = tf.slice_cols(q, 0, 1);
    NodeId c1 = tf.slice_cols(q, 1, 2);
    NodeId fi = row == 0 ? tf.mul(c0, c1) : tf.add(c0, c1);
    Tensor jrow = tf.backward(tf.sum_all(fi)).at(q);
    composed[0] += dg_dv[row] * jrow[0];
    composed[1] += dg_dv[row] * jrow[1];
  }
  CHECK(std::abs(direct[0] - composed[0]) <=
        1e-12 * std::max(1.0, std::abs(composed[0])));
  CHECK(std::abs(direct[1] - composed[1]) <=
        1e-12 * std::max(1.0, std::abs(composed[1])));
}

TEST_CASE("replay reproduces every node value exactly") {
  Tape tape;
  RngStream rng(17, 3);
  NodeId p = tape.parameter(rnd(rng, {4, 3}));
  NodeId g = tape.constant(Tensor::full({3}, 1.1));
  NodeId b = tape.constant(Tensor::zeros({3}));
  NodeId bn = tape.batchnorm_train(p, g, b, 1e-6);
  NodeId out = tape.mean_all(tape.square(tape.softmax(tape.relu(bn))));
  std::vector<Tensor> before;
  for (NodeId id = 0; id < tape.size(); ++id) before.push_back(tape.value(id));
  tape.replay();
  for (NodeId id = 0; id < tape.size(); ++id) CHECK(tape.value(id) == before[id]);
  CHECK(out == tape.size() - 1);
}

TEST_CASE("validation mode raises on non-finite values") {
  Tape tape(Precision::f64, /*validate=*/true);
  NodeId p = tape.constant(Tensor::from({1}, {1000.0}));
  CHECK_THROWS_AS(tape.exp(p), DivergenceError);  // exp(1000) overflows
}

TEST_CASE("f32 mode rounds op results through float") {
  Tape t64(Precision::f64);
  Tape t32(Precision::f32);
  const Tensor v = Tensor::from({1}, {0.1});
  NodeId a64 = t64.square(t64.constant(v));
  NodeId a32 = t32.square(t32.constant(v));
  CHECK(t64.value(a64)[0] == 0.1 * 0.1);
  const float f = 0.1f;
  CHECK(t32.value(a32)[0] == static_cast<double>(f * f));
}

TEST_CASE("unknown input ids are rejected") {
  Tape tape;
  CHECK_THROWS_AS(tape.record(Op::kSquare, {42}), ContractError);
}
