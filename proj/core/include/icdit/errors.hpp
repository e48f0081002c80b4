#pragma once

#include <stdexcept>
#include <string>

namespace icdit {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or geometries that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or unknown configuration keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a failed decomposition.
class NumericError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

/// Failure of an annotation agent (remote timeout, malformed reply, ...).
class AgentError : public Error {
 public:
  AgentError(std::string patch_id, const std::string& what)
      : Error("agent error on patch " + patch_id + ": " + what), patch_id_(std::move(patch_id)) {}

  const std::string& patch_id() const noexcept { return patch_id_; }

 private:
  std::string patch_id_;
};

}  // namespace icdit
