// Error types shared by every moon module. The CLI maps them onto exit codes.
#pragma once

#include <stdexcept>
#include <string>

namespace moon {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not conform to an op's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or input data (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or degenerate numerics (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Filesystem and format failures (exit code 4).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace moon
