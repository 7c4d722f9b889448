#pragma once

#include <stdexcept>
#include <string>

namespace chybrid {

/// Shape or length mismatch between operands.
class DimensionError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Caller violated a documented precondition (e.g. backward on a non-scalar).
class ContractError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// NaN or Inf where finite values are required.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Malformed corpus or checkpoint file.
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace chybrid
