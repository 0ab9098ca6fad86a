#pragma once

#include <stdexcept>
#include <string>

namespace mixq {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
  using Error::Error;
};

// Operand shapes are not conformable for the requested operation.
struct ShapeError : InvalidArgument {
  using InvalidArgument::InvalidArgument;
};

// An integer accumulation would leave the 32-bit range.
struct OverflowError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// QT8 decode failures. Each condition has its own type so callers can tell
// a foreign file apart from a damaged one.
struct FormatError : Error {
  using Error::Error;
};
struct BadMagic : FormatError {
  using FormatError::FormatError;
};
struct VersionMismatch : FormatError {
  using FormatError::FormatError;
};
struct TruncatedPayload : FormatError {
  using FormatError::FormatError;
};
struct UnknownDtype : FormatError {
  using FormatError::FormatError;
};

}  // namespace mixq
