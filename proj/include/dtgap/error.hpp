#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dtgap {

// Base for every error raised by the library. Callers that only need a
// message catch this; the subclasses exist for tests and stage labelling.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class UnstableStructure : public Error {
 public:
  UnstableStructure(const std::string& what, std::size_t rank_deficiency)
      : Error(what), rank_deficiency_(rank_deficiency) {}
  std::size_t rank_deficiency() const { return rank_deficiency_; }

 private:
  std::size_t rank_deficiency_;
};

class Diverged : public Error {
 public:
  Diverged(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

class InsufficientData : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  SchemaError(const std::string& what, std::size_t line = 0)
      : Error(what), line_(line) {}
  // 1-based line number in the offending file, 0 when not line-addressable.
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace dtgap
