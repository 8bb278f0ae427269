#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mirage {

// Every failure raised by the library derives from mirage::Error so callers
// can catch one type; the subclasses carry the failure category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents. The message names the offending axes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid user-supplied configuration (bad k, non-integral conv extent, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t index = npos)
      : Error(what), index_(index) {}
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

// Non-finite training loss.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::size_t epoch, std::size_t batch)
      : NumericError(what + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ")"),
        epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

// Parameter-set mismatch between a spec and a parameter map.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// Data protocol violation (e.g. overlapping private/public classes).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents. offset() is the byte position of the problem.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mirage
