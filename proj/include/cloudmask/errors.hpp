#pragma once

#include <stdexcept>
#include <string>

namespace cloudmask {

/// Base class of every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension violation in a tensor/layer operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid run or model configuration (unknown key, incompatible modes).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset problem: missing class, unlabeled target, empty input.
class DataError : public Error {
 public:
  using Error::Error;
};

/// On-disk format violation: bad magic, truncation, version mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace cloudmask
