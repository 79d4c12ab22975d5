#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace medres {

// Root of every error the library throws. Callers that only care about
// "something in medres failed" can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Unclassifiable : public Error {
 public:
  explicit Unclassifiable(std::string text)
      : Error("cannot classify question: '" + text + "'"), text_(std::move(text)) {}
  const std::string& text() const noexcept { return text_; }

 private:
  std::string text_;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  SchemaError(std::size_t line, std::string field, const std::string& what)
      : Error("line " + std::to_string(line) + ", field '" + field + "': " + what),
        line_(line),
        field_(std::move(field)) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class OverlapError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class MissingPlaceholder : public Error {
 public:
  using Error::Error;
};

// Chat / expert transport failures. RateLimited is retryable, as is
// TransportError; PrivacyViolation never is.
class TransportError : public Error {
 public:
  using Error::Error;
};

class RateLimited : public TransportError {
 public:
  using TransportError::TransportError;
};

class PrivacyViolation : public Error {
 public:
  using Error::Error;
};

class ScriptExhausted : public Error {
 public:
  using Error::Error;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

class UnboundSlot : public Error {
 public:
  using Error::Error;
};

class UnboundAlias : public Error {
 public:
  using Error::Error;
};

class FixtureMiss : public Error {
 public:
  using Error::Error;
};

class EmptyCorpus : public Error {
 public:
  using Error::Error;
};

class LengthMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace medres
