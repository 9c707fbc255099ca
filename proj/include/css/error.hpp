#pragma once

#include <stdexcept>
#include <string>

namespace css {

/// Tensor or layer dimensions do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input lies outside the mathematical domain of an operation (log of a
/// non-positive value, non-finite gradient, ...).
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A caller violated a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// File-level failures (missing file, unsupported audio format, corrupt
/// checkpoint).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace css
