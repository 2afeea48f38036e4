#pragma once

#include <stdexcept>
#include <string>

namespace xrgen {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or parameter shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced in a forward or backward pass, or a non-finite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad input data: manifests, images, feature files, ground-truth boxes.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible binary/text file format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or precondition violation by the caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace xrgen
