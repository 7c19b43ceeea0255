#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace decolle {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameter, topology or config document.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes passed to an operation do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed event file. `offset()` is the byte offset of the offending record.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnsupportedFormatError : public Error {
 public:
  using Error::Error;
};

class SampleTooShortError : public Error {
 public:
  using Error::Error;
};

class TopologyMismatchError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline void require_shape(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace decolle
