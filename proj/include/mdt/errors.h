#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mdt {

/// Tensor shapes or token counts that do not fit the operation.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (detached loss, active dropout
/// under gradient checking, inconsistent ablation, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN or Inf reached a place where values must be finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File parsing and file-system failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A metric that is not defined on its input (e.g. AUROC with one class).
class UndefinedMetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace mdt
