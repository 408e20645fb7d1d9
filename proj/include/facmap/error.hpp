#pragma once

#include <stdexcept>
#include <string>

namespace facmap {

// Hard errors raised by the engine. The CLI maps each family to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or size mismatch inside the numeric core.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or unknown key (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable or malformed input data (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or otherwise broken numerics (exit code 4).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace facmap
