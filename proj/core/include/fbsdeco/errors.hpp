#pragma once

#include <stdexcept>
#include <string>

namespace fbsdeco {

// Shape rule violated for an op (incompatible operand dimensions).
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Precondition of an operation violated (non-scalar root, bad mode, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf escaped into gradients or simulated states.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed checkpoint / config file.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fbsdeco
