#pragma once

#include <stdexcept>
#include <string>

namespace chronoformer {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad hyperparameter, infeasible generator setup).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, or an ill-defined numeric operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given labels (e.g. single class).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// File could not be read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint payload fails its CRC32 trailer.
class ChecksumError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint was written by an incompatible format version or model setup.
class IncompatibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace chronoformer
