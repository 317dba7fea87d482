#pragma once

#include <stdexcept>
#include <string>

namespace convsafe {

// Base for every recoverable failure caused by input data (exit code 2 in the CLI).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed arguments that violate a documented precondition (exit code 1).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyAfterCleaning : public DataError {
 public:
  explicit EmptyAfterCleaning(const std::string& thread_id, const std::string& where = "post")
      : DataError("thread " + thread_id + ": " + where + " is empty after cleaning"),
        thread_id_(thread_id) {}
  const std::string& thread_id() const { return thread_id_; }

 private:
  std::string thread_id_;
};

class InsufficientOffensive : public DataError {
 public:
  InsufficientOffensive(const std::string& source, std::size_t found, std::size_t wanted)
      : DataError("insufficient offensive threads for source '" + source + "': found " +
                  std::to_string(found) + ", wanted " + std::to_string(wanted)),
        found_(found),
        wanted_(wanted) {}
  std::size_t found() const { return found_; }
  std::size_t wanted() const { return wanted_; }

 private:
  std::size_t found_;
  std::size_t wanted_;
};

class MissingCoverage : public DataError {
 public:
  using DataError::DataError;
};

class NotEnoughData : public DataError {
 public:
  using DataError::DataError;
};

class LengthMismatch : public UsageError {
 public:
  LengthMismatch(std::size_t a, std::size_t b)
      : UsageError("length mismatch: " + std::to_string(a) + " vs " + std::to_string(b)) {}
};

class DimensionMismatch : public UsageError {
 public:
  DimensionMismatch(std::size_t expected, std::size_t got)
      : UsageError("dimension mismatch: expected " + std::to_string(expected) + ", got " +
                   std::to_string(got)) {}
};

class DivergenceDetected : public DataError {
 public:
  using DataError::DataError;
};

class NoPositives : public DataError {
 public:
  explicit NoPositives(std::size_t cls)
      : DataError("dev set has no gold positives for class " + std::to_string(cls)), cls_(cls) {}
  std::size_t cls() const { return cls_; }

 private:
  std::size_t cls_;
};

class RemoteUnavailable : public DataError {
 public:
  using DataError::DataError;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class BadRegex : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace convsafe
