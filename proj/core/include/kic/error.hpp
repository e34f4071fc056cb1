#pragma once

#include <stdexcept>
#include <string>

namespace kic {

// Base for all library errors. Callers that only care about "something
// went wrong" can catch this; the subclasses carry the category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input data (records, files, configs).
class FormatError : public Error {
 public:
  using Error::Error;
};

// A caller violated an operation precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Vector dimensions that do not line up.
class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf appeared where only finite values are legal.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Something the operation needs (index, checkpoint, partition) is absent.
class NotFound : public Error {
 public:
  using Error::Error;
};

}  // namespace kic
