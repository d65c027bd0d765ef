#pragma once

#include <stdexcept>
#include <string>

namespace owssl {

// Plain std::invalid_argument is thrown for bad call arguments. The types
// below distinguish the remaining failure classes so callers (and the CLI
// exit-code mapping) can tell configuration mistakes from runtime failures.

class InsufficientDataError : public std::runtime_error {
 public:
  explicit InsufficientDataError(const std::string& what)
      : std::runtime_error(what) {}
};

class DivergedTrainingError : public std::runtime_error {
 public:
  DivergedTrainingError(const std::string& what, long batch_index)
      : std::runtime_error(what), batch_index_(batch_index) {}

  long batch_index() const noexcept { return batch_index_; }

 private:
  long batch_index_;
};

class InternalConsistencyError : public std::runtime_error {
 public:
  explicit InternalConsistencyError(const std::string& what)
      : std::runtime_error(what) {}
};

class UndefinedScoreError : public std::runtime_error {
 public:
  explicit UndefinedScoreError(const std::string& what)
      : std::runtime_error(what) {}
};

class InvalidComparisonError : public std::runtime_error {
 public:
  explicit InvalidComparisonError(const std::string& what)
      : std::runtime_error(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace owssl
