#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cvloc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mismatched tensor shapes, channel counts or weight dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid geometric configuration (bad camera, grid, output size < 1).
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text file. `offset()` is the byte offset (or line
/// number for text formats) where decoding stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Numerically degenerate input: the problem has no unique answer.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class NoSupportError : public DegenerateError {
 public:
  using DegenerateError::DegenerateError;
};

class RotationIndeterminateError : public DegenerateError {
 public:
  using DegenerateError::DegenerateError;
};

class ConditioningError : public DegenerateError {
 public:
  using DegenerateError::DegenerateError;
};

}  // namespace cvloc
