#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

namespace floodlora {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid hyperparameter or architecture setting.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse by the caller (non-scalar loss, empty split, bad flag...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Operation not valid in the object's current state (double merge...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Input data violates a value contract (non-binary targets...).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Training diverged or produced a non-finite value.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  IoError(const std::filesystem::path& path, const std::string& what)
      : std::runtime_error(path.string() + ": " + what), path_(path) {}

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace floodlora
