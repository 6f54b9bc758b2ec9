#pragma once

#include <stdexcept>
#include <string>

namespace afm {

// Error taxonomy. The CLI maps these onto process exit codes.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes (names both shapes in the message).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or model/layer configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad input data: unreadable files, out-of-range labels, empty classes.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or tensor-dump content does not match what was expected.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Requested analysis is not available for this model (e.g. routing stats on an MLP head).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace afm
