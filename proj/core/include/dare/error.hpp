#pragma once

#include <stdexcept>
#include <string>

namespace dare {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on shapes, indices or call order was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Input is numerically degenerate (zero vector, zero row).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Matrix is rank deficient where full rank is required.
class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

/// Theory routines called outside the single-layer, single-head regime.
class RegimeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dare
