#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace iert {

enum class ErrorKind {
  kConfig,
  kShape,
  kBounds,
  kContract,
  kCorruptCheckpoint,
  kEmptyCorpus,
  kSampling,
  kValidation,
  kNonFinite,
  kIo,
  kNonDeterministic,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library. `kind()` is stable and machine-readable;
/// the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace iert
