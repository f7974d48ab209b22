#pragma once

#include <stdexcept>
#include <string>

namespace sewkit {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pattern file parsing. `path` is a JSON-pointer-like location, e.g. "/panels/2/edges/1".
class FileError : public Error {
 public:
  FileError(const std::string& kind, std::string path, const std::string& what)
      : Error(kind + " at '" + path + "': " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class MalformedFile : public FileError {
 public:
  MalformedFile(std::string path, const std::string& what)
      : FileError("malformed file", std::move(path), what) {}
};

class SchemaViolation : public FileError {
 public:
  SchemaViolation(std::string path, const std::string& what)
      : FileError("schema violation", std::move(path), what) {}
};

class InvariantViolation : public FileError {
 public:
  InvariantViolation(std::string path, const std::string& what)
      : FileError("invariant violation", std::move(path), what) {}
};

#define SEWKIT_DEFINE_ERROR(Name)      \
  class Name : public Error {          \
   public:                             \
    using Error::Error;                \
  };

SEWKIT_DEFINE_ERROR(CapacityExceeded)
SEWKIT_DEFINE_ERROR(DomainError)
SEWKIT_DEFINE_ERROR(EmptyPanel)
SEWKIT_DEFINE_ERROR(NonUnitQuaternion)
SEWKIT_DEFINE_ERROR(DegenerateViewBox)
SEWKIT_DEFINE_ERROR(ShapeMismatch)
SEWKIT_DEFINE_ERROR(NonScalarRoot)
SEWKIT_DEFINE_ERROR(IOError)
SEWKIT_DEFINE_ERROR(DuplicateAfterMaxRetries)
SEWKIT_DEFINE_ERROR(LengthMismatch)
SEWKIT_DEFINE_ERROR(DatasetMissing)
SEWKIT_DEFINE_ERROR(NonFiniteLoss)
SEWKIT_DEFINE_ERROR(CheckpointCorrupt)
SEWKIT_DEFINE_ERROR(ConfigError)

#undef SEWKIT_DEFINE_ERROR

}  // namespace sewkit
