#pragma once

#include <stdexcept>
#include <string>

namespace rae {

// Base for every error the library raises. Subclasses carry the category the
// CLI maps to exit codes and messages.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or volume dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or model/train configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Weight/stream fingerprint does not match the model topology.
class TopologyError : public Error {
 public:
  using Error::Error;
};

// Training diverged or data is unusable.
class TrainingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace rae
