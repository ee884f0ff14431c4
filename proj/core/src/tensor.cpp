#include "fbsdeco/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fbsdeco/errors.hpp"

namespace fbsdeco {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  return full(std::move(shape), 0.0);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_.assign(shape_numel(t.shape_), value);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.data_.assign(1, value);
  return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape does not match value count");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("Tensor::item: tensor is not one-element");
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::round_to_f32() {
  for (double& v : data_) {
    if (v > std::numeric_limits<float>::max()) {
      v = std::numeric_limits<double>::infinity();
    } else if (v < std::numeric_limits<float>::lowest()) {
      v = -std::numeric_limits<double>::infinity();
    } else {
      v = static_cast<double>(static_cast<float>(v));
    }
  }
}

void Tensor::fill(double value) {
  std::fill(data_.begin(), data_.end(), value);
}

}  // namespace fbsdeco
