#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace finecount {

enum class ErrorKind {
  kInvalidSpec,
  kInvalidArgument,
  kInsufficientNegatives,
  kExternalService,
  kDatasetSynthesis,
  kBackend,
  kNonFinite,
  kCapability,
  kIo,
  kParse,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  // Transport or availability failures that may succeed if repeated.
  bool retriable() const { return kind_ == ErrorKind::kExternalService; }

 private:
  ErrorKind kind_;
};

class InsufficientNegativesError : public Error {
 public:
  InsufficientNegativesError(const std::string& message,
                             std::vector<std::string> obtained)
      : Error(ErrorKind::kInsufficientNegatives, message),
        obtained_(std::move(obtained)) {}

  const std::vector<std::string>& obtained() const { return obtained_; }

 private:
  std::vector<std::string> obtained_;
};

// Wraps a failure from one stage of a multi-stage pipeline.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), stage + ": " + cause.what()),
        stage_(std::move(stage)) {}

  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace finecount
