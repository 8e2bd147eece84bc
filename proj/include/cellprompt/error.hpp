#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cellprompt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument was violated.
class InvalidArgument : public Error {
public:
  using Error::Error;
};

/// Two arrays that must share a shape do not.
class DimensionMismatch : public Error {
public:
  using Error::Error;
};

/// A named resource (file, job, checkpoint, dataset) does not exist.
class NotFound : public Error {
public:
  using Error::Error;
};

/// A file could not be decoded or carries an unsupported layout/version.
class FormatError : public Error {
public:
  using Error::Error;
};

/// One rejected configuration field.
struct FieldIssue {
  std::string field;
  std::string message;
};

/// A configuration failed validation; carries one issue per offending field.
class ConfigError : public InvalidArgument {
public:
  explicit ConfigError(std::vector<FieldIssue> issues)
      : InvalidArgument(summarize(issues)), issues_(std::move(issues)) {}

  const std::vector<FieldIssue>& issues() const { return issues_; }

private:
  static std::string summarize(const std::vector<FieldIssue>& issues) {
    std::string out = "invalid configuration";
    for (const auto& i : issues) out += "; " + i.field + ": " + i.message;
    return out;
  }

  std::vector<FieldIssue> issues_;
};

} // namespace cellprompt
