// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sfrz {

// Process exit codes surfaced by the CLI.
enum class ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kData = 3,
  kTraining = 4,
  kCheckpoint = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Shape disagreement between tensor operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ExitCode::kInternal, "dimension error: " + what) {}
};

// Token or class index outside its valid range.
class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error(ExitCode::kData, "index error: " + what) {}
};

// A caller violated an API precondition.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ExitCode::kInternal, "contract error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ExitCode::kConfig, "config error: " + what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ExitCode::kData, "data error: " + what) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error(ExitCode::kTraining, "training error: " + what) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error(ExitCode::kCheckpoint, "checkpoint error: " + what) {}
};

}  // namespace sfrz
