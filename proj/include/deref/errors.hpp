#pragma once

#include <stdexcept>
#include <string>

namespace deref {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values (dimensions, segment sets, flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Data does not satisfy an operation's preconditions.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed cohort or checkpoint file. The message names the offending field.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// A statistic is undefined for the given input (no comparable pairs, no events).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training diverged; the message names the loss term that went non-finite.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace deref
