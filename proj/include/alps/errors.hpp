#pragma once

#include <stdexcept>
#include <string>

namespace alps {

// Error hierarchy. Each leaf maps to one failure class named in the file
// format and API contracts; the CLI maps the categories onto exit codes.
enum class ErrorCategory { Usage, Data, Numeric };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ErrorCategory category() const noexcept { return ErrorCategory::Data; }
};

#define ALPS_DEFINE_ERROR(Name, Category)                                   \
  class Name : public Error {                                               \
   public:                                                                  \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {}    \
    ErrorCategory category() const noexcept override { return Category; }  \
  };

ALPS_DEFINE_ERROR(FormatError, ErrorCategory::Data)
ALPS_DEFINE_ERROR(VersionError, ErrorCategory::Data)
ALPS_DEFINE_ERROR(CorruptError, ErrorCategory::Data)
ALPS_DEFINE_ERROR(MissingTensorError, ErrorCategory::Data)
ALPS_DEFINE_ERROR(ShapeError, ErrorCategory::Data)
ALPS_DEFINE_ERROR(GeometryError, ErrorCategory::Data)
ALPS_DEFINE_ERROR(IoError, ErrorCategory::Data)
ALPS_DEFINE_ERROR(RangeError, ErrorCategory::Usage)
ALPS_DEFINE_ERROR(ValueError, ErrorCategory::Usage)
ALPS_DEFINE_ERROR(NumericError, ErrorCategory::Numeric)

// A non-finite value where finite numbers are required.
class NonFiniteError : public ValueError {
 public:
  explicit NonFiniteError(const std::string& what) : ValueError("non-finite value: " + what) {}
  ErrorCategory category() const noexcept override { return ErrorCategory::Numeric; }
};

#undef ALPS_DEFINE_ERROR

}  // namespace alps
