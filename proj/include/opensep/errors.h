// errors.h
// Exception types shared by all opensep modules.

#pragma once

#include <stdexcept>
#include <string>

namespace opensep {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition or shape violation on caller-supplied data.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// File system or audio container failure. Carries the offending path.
class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Remote captioner/LLM failure after exhausting retries.
class BackendError : public Error {
 public:
  BackendError(const std::string& what, int attempts)
      : Error(what + " (attempts: " + std::to_string(attempts) + ")"),
        attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

// Backend answered, but the answer could not be interpreted.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw_response() const { return raw_; }

 private:
  std::string raw_;
};

// Mock captioner asked about audio it has no labels for.
class UnknownClip : public Error {
 public:
  using Error::Error;
};

// bss_eval references are (numerically) linearly dependent.
class DegenerateReferences : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss. checkpoint() names the last good state
// on disk, or is empty when nothing has been written yet.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::string checkpoint, int epoch)
      : Error(what), checkpoint_(std::move(checkpoint)), epoch_(epoch) {}
  const std::string& checkpoint() const { return checkpoint_; }
  int epoch() const { return epoch_; }

 private:
  std::string checkpoint_;
  int epoch_;
};

}  // namespace opensep
