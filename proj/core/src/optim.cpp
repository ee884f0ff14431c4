#include "fbsdeco/optim.hpp"

#include <cmath>

#include "fbsdeco/errors.hpp"

namespace fbsdeco {

void OptimizerConfig::check() const {
  if (!(learning_rate > 0.0))
    throw ContractError("OptimizerConfig: learning rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ContractError("OptimizerConfig: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ContractError("OptimizerConfig: eps must be positive");
  if (decay_interval > 0 && !(decay_factor > 0.0))
    throw ContractError("OptimizerConfig: decay factor must be positive");
}

double OptimizerConfig::lr_at(std::uint64_t t) const {
  if (decay_interval == 0) return learning_rate;
  return learning_rate *
         std::pow(decay_factor, static_cast<double>(t / decay_interval));
}

void optim_step(ParameterSet& params, const std::vector<const Tensor*>& grads,
                OptimizerState& state, const OptimizerConfig& config,
                Precision precision, const std::string& label) {
  config.check();
  auto tensors = params.trainable();
  if (grads.size() != tensors.size())
    throw ContractError("optim_step: gradient list does not cover the "
                        "trainable parameters");

  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!grads[i]->same_shape(*tensors[i].tensor))
      throw ContractError("optim_step: gradient shape mismatch at " +
                          label + tensors[i].name);
    if (!grads[i]->all_finite())
      throw DivergenceError("optim_step: non-finite gradient for parameter " +
                            label + tensors[i].name);
  }

  double clip_scale = 1.0;
  if (config.max_grad_norm > 0.0) {
    double sq = 0.0;
    for (const Tensor* g : grads)
      for (std::size_t i = 0; i < g->numel(); ++i) sq += (*g)[i] * (*g)[i];
    const double norm = std::sqrt(sq);
    if (norm > config.max_grad_norm) clip_scale = config.max_grad_norm / norm;
  }

  if (state.m.empty()) {
    for (auto& nt : tensors) {
      state.m.push_back(Tensor::zeros(nt.tensor->shape()));
      state.v.push_back(Tensor::zeros(nt.tensor->shape()));
    }
  }
  if (state.m.size() != tensors.size())
    throw ContractError("optim_step: state does not match parameter layout");

  const double lr = config.lr_at(state.t);
  state.t += 1;

  if (config.method == OptimMethod::kSgd) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      Tensor& p = *tensors[i].tensor;
      const Tensor& g = *grads[i];
      for (std::size_t k = 0; k < p.numel(); ++k)
        p[k] -= lr * clip_scale * g[k];
      if (precision == Precision::f32) p.round_to_f32();
    }
    return;
  }

  const double b1 = config.beta1, b2 = config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor& p = *tensors[i].tensor;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = *grads[i];
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = clip_scale * g[k];
      m[k] = b1 * m[k] + (1.0 - b1) * gk;
      v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + config.eps);
    }
    if (precision == Precision::f32) p.round_to_f32();
  }
}

}  // namespace fbsdeco
