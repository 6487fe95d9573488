#pragma once

#include <stdexcept>
#include <string>

namespace stylebank {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition or shape violation on an in-memory argument.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Numerical failure (non-finite loss, diverging fit).
class NumericError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrc {
  io,
  bad_magic,
  bad_version,
  truncated,
  corrupt_index,
  not_found,
  duplicate_key,
  unsorted,
  shape_mismatch,
};

inline const char* to_string(FormatErrc code) {
  switch (code) {
    case FormatErrc::io: return "io";
    case FormatErrc::bad_magic: return "bad_magic";
    case FormatErrc::bad_version: return "bad_version";
    case FormatErrc::truncated: return "truncated";
    case FormatErrc::corrupt_index: return "corrupt_index";
    case FormatErrc::not_found: return "not_found";
    case FormatErrc::duplicate_key: return "duplicate_key";
    case FormatErrc::unsorted: return "unsorted";
    case FormatErrc::shape_mismatch: return "shape_mismatch";
  }
  return "unknown";
}

/// Error raised by the binary container readers and writers.
class FormatError : public Error {
 public:
  FormatError(FormatErrc code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}

  FormatErrc code() const noexcept { return code_; }

 private:
  FormatErrc code_;
};

}  // namespace stylebank
