#pragma once

#include <stdexcept>
#include <string>

namespace ast {

// Validation failures (bad shapes, bad files, bad arguments). The CLI maps
// these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class InvalidBatchError : public Error {
 public:
  using Error::Error;
};

class EmptyForegroundError : public Error {
 public:
  EmptyForegroundError() : Error("mask has no foreground pixels") {}
  explicit EmptyForegroundError(const std::string& what) : Error(what) {}
};

class InvalidCornerError : public Error {
 public:
  using Error::Error;
};

class DegenerateLabelsError : public Error {
 public:
  DegenerateLabelsError() : Error("auroc needs both positive and negative labels") {}
};

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

// Numerical failures (overflow, NaN). The CLI maps these to exit code 2.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ast
