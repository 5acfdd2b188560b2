#pragma once

#include <stdexcept>
#include <string>

namespace robustcam {

// Every failure surfaced by the library derives from Error. The exit code is
// what the command-line tool returns when the exception escapes a command.
class Error : public std::runtime_error {
 public:
  Error(const std::string& kind, int exit_code, const std::string& what)
      : std::runtime_error(what), kind_(kind), exit_code_(exit_code) {}

  const std::string& kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return exit_code_; }

 private:
  std::string kind_;
  int exit_code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape", 3, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", 2, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data", 3, what) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what)
      : Error("checkpoint", 4, what) {}
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what)
      : Error("divergence", 5, what) {}
};

}  // namespace robustcam
