#pragma once

#include <stdexcept>
#include <string>

namespace otkd {

/// Base class of every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor dimension disagreement; the message carries both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operation produced a NaN or Inf; the message names the op.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an operation's contract.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A (target, frame-count) pair admits no valid alignment.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Bad or inconsistent run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Synthetic data generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint, dataset, or model are mutually incompatible.
class CompatError : public Error {
 public:
  using Error::Error;
};

/// File-level I/O failure.
class IoError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public IoError {
 public:
  using IoError::IoError;
};

class BadVersionError : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace otkd
