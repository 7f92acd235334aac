#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace neurotok {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Wrong tensor / matrix dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid argument or broken invariant on user-supplied data.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity where a finite value is required.
class NonFiniteError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Token stream / file parse failure. `position` is a byte offset for token
// streams and a 1-based line number for line-oriented files.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what + " (at " + std::to_string(position) + ")"), position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

}  // namespace neurotok
