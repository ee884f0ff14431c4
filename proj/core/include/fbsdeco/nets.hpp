#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbsdeco/tape.hpp"
#include "fbsdeco/tensor.hpp"

namespace fbsdeco {

enum class Activation : std::uint8_t { kRelu };
enum class OutputMap : std::uint8_t { kIdentity, kSoftmax, kNonneg };
// kBatchStats normalizes with batch statistics like training but leaves the
// running statistics untouched (read-only evaluation through the training
// normalization).
enum class NetMode : std::uint8_t { kTrain, kEval, kBatchStats };

// Feed-forward network: optional batchnorm on the raw input, then
// affine -> batchnorm (per-layer flag) -> relu for every layer but the
// last; the output map psi follows the final affine (and its batchnorm
// when flagged).
struct MLPConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 0;
  Activation activation = Activation::kRelu;
  OutputMap output_map = OutputMap::kIdentity;
  bool input_bn = false;        // normalize the raw input batch
  std::vector<bool> batchnorm;  // one flag per affine layer; empty = all off
  bool time_input = false;      // caller concatenates normalized time t/T
  double bn_eps = 1e-6;
  double bn_momentum = 0.99;

  std::size_t depth() const { return hidden.size() + 1; }
  // [input_dim, hidden..., output_dim]
  std::vector<std::size_t> layer_dims() const;
  bool bn_at(std::size_t layer) const {
    return layer < batchnorm.size() && batchnorm[layer];
  }
  void check() const;
};

// The generic architecture: 1 input layer, 3 hidden layers of width
// (state_dim + 10), relu, batchnorm on the hidden layers.
MLPConfig default_mlp_config(std::size_t state_dim, std::size_t output_dim,
                             OutputMap map, bool time_input,
                             std::size_t hidden_width = 0);

struct BatchNormState {
  Tensor gamma, beta;          // trainable scale/shift
  Tensor run_mean, run_var;    // running statistics (not optimizer-updated)
  bool present() const { return gamma.numel() > 0; }
};

struct ParameterSet {
  std::vector<Tensor> weights;        // w_i: (d_i x d_{i-1})
  std::vector<Tensor> biases;         // b_i: (d_i)
  // slot 0: input batchnorm; slot 1+i: batchnorm after affine layer i
  std::vector<BatchNormState> bn;
  NetMode mode = NetMode::kTrain;

  struct NamedTensor {
    std::string name;
    Tensor* tensor;
  };
  // Trainable tensors in fixed order (weights, biases, bn scale/shift);
  // running statistics are excluded.
  std::vector<NamedTensor> trainable();
  // Everything, including running statistics (checkpoint payload order).
  std::vector<NamedTensor> all_tensors();

  bool operator==(const ParameterSet& o) const;
};

// Uniform weights on [-sqrt(6/fan_in), +sqrt(6/fan_in)], zero biases,
// batchnorm scale 1 / shift 0, running mean 0 / variance 1. Deterministic
// in the seed.
ParameterSet init_params(const MLPConfig& config, std::uint64_t seed);

// Per-layer parameter nodes registered on a tape for one forward/backward
// pass. Parameter node ids are contiguous in registration order.
struct BoundNet {
  const MLPConfig* config = nullptr;
  ParameterSet* params = nullptr;
  struct Layer {
    NodeId w = kNoNode, b = kNoNode, gamma = kNoNode, beta = kNoNode;
  };
  NodeId in_gamma = kNoNode, in_beta = kNoNode;  // input batchnorm
  std::vector<Layer> layers;
};

BoundNet bind_net(Tape& tape, const MLPConfig& config, ParameterSet& params);

// One batchnorm layer: train mode normalizes with batch statistics and
// updates the running stats (momentum 0.99 by default); eval mode
// normalizes with the running stats. Scale/shift applied in both.
NodeId batchnorm_forward(Tape& tape, BatchNormState& state, NodeId gamma,
                         NodeId beta, NodeId input, NetMode mode, double eps,
                         double momentum);

// Forward pass of a bound net; input shape (batch x input_dim) where
// input_dim already includes the time column when config.time_input is set.
NodeId mlp_forward(Tape& tape, const BoundNet& net, NodeId input);

// Convenience: concatenates the normalized time column when the config
// asks for it, then runs mlp_forward.
NodeId net_forward_tx(Tape& tape, const BoundNet& net, double t_norm, NodeId x);

// Constrained output maps on plain tensors (rows = batch).
Tensor output_softmax(const Tensor& logits);
Tensor output_nonneg(const Tensor& values);

// Named map from control role to (config, params).
struct NetworkBundle {
  struct Entry {
    std::string role;
    MLPConfig config;
    ParameterSet params;
  };
  std::vector<Entry> entries;

  Entry* find(const std::string& role);
  const Entry* find(const std::string& role) const;
  Entry& at(const std::string& role);
  const Entry& at(const std::string& role) const;
  void set_mode(NetMode mode);
};

// Flat binary checkpoint: text header listing (role, tensor, shape), then
// little-endian f64 payloads in header order; each net's MLPConfig is
// serialized alongside as one JSON line.
void save_bundle(const NetworkBundle& bundle, const std::string& path);
NetworkBundle load_bundle(const std::string& path);

}  // namespace fbsdeco
