#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sxda {

using Shape = std::vector<std::size_t>;

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters, options or geometry.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An API precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent files on disk.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Checkpoint load failures, one type per failure mode.
class BadMagicError : public DataError {
 public:
  using DataError::DataError;
};
class VersionMismatchError : public DataError {
 public:
  using DataError::DataError;
};
class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};
class OverflowError : public DataError {
 public:
  using DataError::DataError;
};

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace sxda
