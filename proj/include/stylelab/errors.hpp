#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace stylelab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or widths that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range argument or invalid configuration.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an operation's precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

/// Required state (centroids, trained probe, ...) has not been prepared.
class StateError : public Error {
 public:
  using Error::Error;
};

class TraceIntegrityError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf showed up where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file. Carries the byte offset at which parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Artifact produced against a different base model or format version.
class IncompatibilityError : public Error {
 public:
  using Error::Error;
};

/// Input image or value outside the accepted domain.
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace stylelab
