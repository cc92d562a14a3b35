#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace leafnet {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid or mismatched tensor shapes.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Caller-supplied argument outside its domain (labels, empty inputs, ...).
class ArgumentError : public Error {
public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
public:
  using Error::Error;
};

/// A forward cache that no longer matches the network it is used with.
class StateError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

/// Dataset layout or split problems (missing classes, empty partitions).
class DatasetError : public Error {
public:
  using Error::Error;
};

class DecodeError : public Error {
public:
  using Error::Error;
};

/// Malformed model file. Carries the byte offset at which parsing failed.
class FormatError : public Error {
public:
  FormatError(const std::string &what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

} // namespace leafnet
