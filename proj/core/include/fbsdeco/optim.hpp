#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbsdeco/nets.hpp"
#include "fbsdeco/tensor.hpp"

namespace fbsdeco {

enum class OptimMethod : std::uint8_t { kAdam, kSgd };

struct OptimizerConfig {
  OptimMethod method = OptimMethod::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Optional step decay: lr * factor^floor(t / interval); interval 0 = off.
  double decay_factor = 1.0;
  std::uint64_t decay_interval = 0;
  // Optional global-norm gradient clip; 0 = off.
  double max_grad_norm = 0.0;

  void check() const;
  double lr_at(std::uint64_t t) const;  // t = completed steps before this one
};

struct OptimizerState {
  std::vector<Tensor> m, v;  // aligned with ParameterSet::trainable()
  std::uint64_t t = 0;
};

// Applies one parameter update in place. `grads` is aligned with
// params.trainable(); running batchnorm statistics are untouched.
// NaN/Inf gradients raise DivergenceError naming the parameter.
void optim_step(ParameterSet& params, const std::vector<const Tensor*>& grads,
                OptimizerState& state, const OptimizerConfig& config,
                Precision precision = Precision::f64,
                const std::string& label = "");

}  // namespace fbsdeco
