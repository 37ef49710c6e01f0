#pragma once

#include <stdexcept>
#include <string>

namespace madnet {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mismatched lengths or shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A quantity that must be nonzero (a norm, a denominator) vanished.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// An input value lies outside the domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed external data (CSV, JSON, checkpoints).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity encountered during numerical work.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace madnet
