#pragma once

#include <stdexcept>
#include <string>

namespace opcomm {

/// Input that violates a documented precondition or type invariant.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed persisted document (model, policy, CSV, config).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values produced during training or inference.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace opcomm
