#pragma once

#include <stdexcept>
#include <string>

namespace morphgrad {

/// Base class for all library errors. The CLI maps each subclass to a
/// stable process exit code (see tools/).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Mismatched tensor extents between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (even window extent, bad channel split, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An input value outside an operation's stated domain (division by zero,
/// nonpositive base for a fractional power, nonpositive CHM input, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A numerically degenerate intermediate (vanishing CHM denominator,
/// non-finite loss during training, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// API misuse: contract violations that are neither shape nor config
/// specific (non-scalar loss, mixing tapes, non-one-hot target, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// File format or filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace morphgrad
