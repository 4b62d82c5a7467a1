#pragma once

#include <stdexcept>
#include <string>

namespace grafit {

// Error taxonomy shared by the whole library. The CLI maps these onto process
// exit codes: ConfigError/usage -> 1, ContractError/DataError -> 2,
// NumericError -> 3.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated precondition or invariant (bad shapes, out-of-range indices,
// isolated classes, ...).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent persisted data (truncated files, bad magic,
// hierarchy violations).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value produced by a numeric primitive.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace grafit
