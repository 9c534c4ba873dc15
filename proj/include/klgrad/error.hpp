#pragma once

#include <stdexcept>
#include <string>

namespace klgrad {

/// Broad failure classes. The CLI maps each onto a distinct exit code.
enum class ErrorCategory {
  kValidation,   // bad parameters, shapes or configuration
  kUnsupported,  // exact computation requested beyond its size limit
  kNumerical,    // divergence / collapse
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

struct InvalidParameterError : Error {
  explicit InvalidParameterError(const std::string& what)
      : Error(ErrorCategory::kValidation, "invalid parameter: " + what) {}
};

struct EmptySequenceError : Error {
  explicit EmptySequenceError(const std::string& what)
      : Error(ErrorCategory::kValidation, "empty sequence: " + what) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what)
      : Error(ErrorCategory::kValidation, "shape mismatch: " + what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what)
      : Error(ErrorCategory::kValidation, "configuration error: " + what) {}
};

struct SchemaError : Error {
  explicit SchemaError(const std::string& what)
      : Error(ErrorCategory::kValidation, "schema mismatch: " + what) {}
};

struct UnsupportedExactSizeError : Error {
  explicit UnsupportedExactSizeError(const std::string& what)
      : Error(ErrorCategory::kUnsupported, "unsupported exact size: " + what) {}
};

struct DivergenceInfiniteError : Error {
  explicit DivergenceInfiniteError(const std::string& what)
      : Error(ErrorCategory::kNumerical, "divergence is infinite: " + what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what)
      : Error(ErrorCategory::kIo, "i/o error: " + what) {}
};

}  // namespace klgrad
