#pragma once

#include <stdexcept>
#include <string>

namespace downscale {

// Base of every error raised by the library. The CLI maps the subclasses
// onto its exit-code contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated file, bad magic, checksum mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Tensor or grid geometry does not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, diverged replicas.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autodiff graph (stale or missing graph).
class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace downscale
