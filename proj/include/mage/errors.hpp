#pragma once

#include <stdexcept>
#include <string>

namespace mage {

// Base class for all library errors so callers can catch at one level.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not satisfy an operation's precondition.
struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// An index (token id, row, step id) is out of range.
struct IndexError : Error {
  explicit IndexError(const std::string& msg) : Error(msg) {}
};

// An API contract was violated (non-scalar loss, empty sequence, ...).
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// A configuration is internally inconsistent or references unknown names.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File system / serialization failures.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace mage
