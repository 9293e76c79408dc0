// capslid/error.hpp
//
// Single exception type for the library. The kind enum is what callers
// (and the CLI exit-code mapping) dispatch on; the message is for humans.

#pragma once

#include <stdexcept>
#include <string>

namespace capslid {

enum class ErrorKind {
  MalformedWav,
  UnsupportedFormat,
  TooShort,
  ShapeMismatch,
  NonScalarLoss,
  LabelOutOfRange,
  EmptyDataset,
  NonFiniteLoss,
  IoError,
  VersionMismatch,
  ChecksumMismatch,
  CalibrationInsufficient,
  DegenerateClass,
  UsageError,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedWav: return "MalformedWav";
    case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::TooShort: return "TooShort";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonScalarLoss: return "NonScalarLoss";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorKind::CalibrationInsufficient: return "CalibrationInsufficient";
    case ErrorKind::DegenerateClass: return "DegenerateClass";
    case ErrorKind::UsageError: return "UsageError";
  }
  return "Unknown";
}

}  // namespace capslid
