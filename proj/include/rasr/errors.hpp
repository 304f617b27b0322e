#pragma once

#include <stdexcept>
#include <string>

namespace rasr {

// Base of every error raised by the library. `validation()` separates bad
// input (CLI exit code 1) from failures while running (exit code 2).
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& what, bool validation)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)), validation_(validation) {}

  const std::string& kind() const noexcept { return kind_; }
  bool validation() const noexcept { return validation_; }

private:
  std::string kind_;
  bool validation_;
};

#define RASR_DEFINE_ERROR(Name, IsValidation)                                  \
  class Name : public Error {                                                  \
  public:                                                                      \
    explicit Name(const std::string& what) : Error(#Name, what, IsValidation) {} \
  };

RASR_DEFINE_ERROR(EmptyAudio, true)
RASR_DEFINE_ERROR(AudioTooShort, true)
RASR_DEFINE_ERROR(SilentAudio, true)
RASR_DEFINE_ERROR(ShapeError, false)
RASR_DEFINE_ERROR(SequenceTooShort, true)
RASR_DEFINE_ERROR(ConfigError, true)
RASR_DEFINE_ERROR(InfeasibleTarget, true)
RASR_DEFINE_ERROR(EmptyReference, true)
RASR_DEFINE_ERROR(FormatError, true)
RASR_DEFINE_ERROR(IoError, false)

#undef RASR_DEFINE_ERROR

// Prefixes the message with the pipeline stage that raised it.
class StageError : public Error {
public:
  StageError(const std::string& stage, const Error& inner)
      : Error(inner.kind(), "[" + stage + "] " + inner.what(), inner.validation()) {}
};

} // namespace rasr
