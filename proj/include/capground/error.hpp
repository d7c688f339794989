#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace capground {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyCaption : public Error {
 public:
  EmptyCaption() : Error("caption is empty after tokenization") {}
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class EmptyKeysError : public Error {
 public:
  EmptyKeysError() : Error("attention over an empty key set") {}
};

class VocabError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class OracleMissing : public Error {
 public:
  OracleMissing() : Error("corpus has no oracle alignments") {}
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised by the pipeline runner; carries the failing stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace capground
