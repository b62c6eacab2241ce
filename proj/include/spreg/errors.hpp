#pragma once

#include <stdexcept>
#include <string>

namespace spreg {

/// Invalid configuration or input data (maps to CLI exit code 2).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values, solver non-convergence, failed gradient checks (exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system or format problems (exit code 4).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace spreg
