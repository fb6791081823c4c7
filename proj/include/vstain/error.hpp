// Error types shared across the library.
#pragma once

#include <stdexcept>
#include <string>

namespace vstain {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image extents are incompatible with the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required (NaN gradients, NaN loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

class InsufficientFeatures : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometry : public Error {
 public:
  using Error::Error;
};

/// Two network layouts (configs or tensor tables) disagree.
class ArchitectureMismatch : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing input data (images, manifests, reports).
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, corrupt_header, truncated };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace vstain
