#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fbsdeco/tensor.hpp"

namespace fbsdeco {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = 0xffffffffu;

enum class Op : std::uint8_t {
  kConstant,
  kParameter,
  kAdd,        // same shape, or (M x 1) + (M x n) column broadcast
  kSub,        // same shape
  kMul,        // same shape, or (M x 1) * (M x n) column broadcast
  kScale,      // x * alpha          (scalar broadcast)
  kAddScalar,  // x + alpha          (scalar broadcast)
  kMatmul,     // (r x s)(s) -> (r)  or  (M x p)(p x q) -> (M x q)
  kMatmulNT,   // (M x p)(q x p) -> (M x q), right operand used transposed
  kAddRows,    // (M x q) + (q), bias broadcast over rows
  kBmv,        // (M x r x c)(M x c) -> (M x r), per-sample matrix-vector
  kSquare,
  kExp,
  kRelu,       // subgradient at 0 is 0
  kSoftmax,    // row-wise over the last dimension, max-subtracted
  kSumAll,     // -> scalar
  kMeanAll,    // -> scalar
  kRowSum,     // (M x n) -> (M)
  kConcatCols, // (M x a)(M x b) -> (M x (a+b))
  kSliceCols,  // columns [a0, a1)
  kReshape,
  kRepeatRows, // (1 x q) or (q) -> (M x q), M = a0
  kBatchNorm,  // inputs (x, gamma, beta); a0: 1 = train stats, 0 = given stats
};

const char* op_name(Op op);

struct Node {
  Op op;
  std::array<NodeId, 3> in{kNoNode, kNoNode, kNoNode};
  Tensor value;
  double alpha = 0.0;               // kScale / kAddScalar factor, kBatchNorm eps
  std::uint32_t a0 = 0, a1 = 0;     // slice bounds, repeat count, bn mode
  std::vector<Tensor> aux;          // bn: mean, invstd, xhat (or eval stats)
};

// Append-only DAG of tensor operations; inputs of a node always precede it.
// One tape is confined to one thread; independent tapes may run concurrently.
class Tape {
 public:
  explicit Tape(Precision precision = Precision::f64, bool validate = false);

  Precision precision() const { return precision_; }

  NodeId constant(Tensor v);
  NodeId parameter(Tensor v);

  // Generic recording entry point; the typed helpers below all route here.
  NodeId record(Op op, const std::vector<NodeId>& inputs, double alpha = 0.0,
                std::uint32_t a0 = 0, std::uint32_t a1 = 0,
                std::vector<std::size_t> reshape_to = {});

  NodeId add(NodeId a, NodeId b) { return record(Op::kAdd, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return record(Op::kSub, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return record(Op::kMul, {a, b}); }
  NodeId scale(NodeId a, double s) { return record(Op::kScale, {a}, s); }
  NodeId add_scalar(NodeId a, double s) { return record(Op::kAddScalar, {a}, s); }
  NodeId matmul(NodeId a, NodeId b) { return record(Op::kMatmul, {a, b}); }
  NodeId matmul_nt(NodeId x, NodeId w) { return record(Op::kMatmulNT, {x, w}); }
  NodeId add_rows(NodeId x, NodeId bias) { return record(Op::kAddRows, {x, bias}); }
  NodeId bmv(NodeId a, NodeId v) { return record(Op::kBmv, {a, v}); }
  NodeId square(NodeId a) { return record(Op::kSquare, {a}); }
  NodeId exp(NodeId a) { return record(Op::kExp, {a}); }
  NodeId relu(NodeId a) { return record(Op::kRelu, {a}); }
  NodeId softmax(NodeId a) { return record(Op::kSoftmax, {a}); }
  NodeId sum_all(NodeId a) { return record(Op::kSumAll, {a}); }
  NodeId mean_all(NodeId a) { return record(Op::kMeanAll, {a}); }
  NodeId row_sum(NodeId a) { return record(Op::kRowSum, {a}); }
  NodeId concat_cols(NodeId a, NodeId b) { return record(Op::kConcatCols, {a, b}); }
  NodeId slice_cols(NodeId a, std::uint32_t lo, std::uint32_t hi) {
    return record(Op::kSliceCols, {a}, 0.0, lo, hi);
  }
  NodeId reshape(NodeId a, std::vector<std::size_t> shape) {
    return record(Op::kReshape, {a}, 0.0, 0, 0, std::move(shape));
  }
  NodeId repeat_rows(NodeId a, std::uint32_t m) {
    return record(Op::kRepeatRows, {a}, 0.0, m);
  }
  // Train mode computes batch statistics internally (population variance,
  // epsilon-guarded); eval mode normalizes with the supplied running stats.
  NodeId batchnorm_train(NodeId x, NodeId gamma, NodeId beta, double eps);
  NodeId batchnorm_eval(NodeId x, NodeId gamma, NodeId beta, double eps,
                        const Tensor& run_mean, const Tensor& run_var);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  const Node& node(NodeId id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& parameters() const { return params_; }

  // Gradient of a scalar root with respect to every registered parameter.
  // Fan-out accumulation runs in fixed node-id order, so results are
  // bit-reproducible. `active` (parallel to parameters()) restricts which
  // parameter gradients are materialized; pruned subtrees are skipped.
  std::unordered_map<NodeId, Tensor> backward(NodeId root) const;
  std::unordered_map<NodeId, Tensor> backward(NodeId root,
                                              const std::vector<bool>& active) const;

  // Recompute every node value from the leaves in place.
  void replay();

  void clear();

 private:
  Tensor eval_node(const Node& n, std::vector<Tensor>* aux) const;
  void finalize(Tensor& t) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> params_;
  Precision precision_;
  bool validate_;
};

// Max over coordinates of |analytic - central difference| /
// max(|analytic|, |numeric|, 1e-12) for a scalar function of one tensor.
// `build` must record the function on the given tape from the given input
// node and return the scalar root.
double grad_check(const std::function<NodeId(Tape&, NodeId)>& build,
                  const Tensor& point, double step,
                  Precision precision = Precision::f64);

}  // namespace fbsdeco
