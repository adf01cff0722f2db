#pragma once

#include <stdexcept>
#include <string>

namespace neuroadapt {

// Root of every error the library throws. `kind()` is a stable short tag that
// ends up in failed run records.
class Error : public std::runtime_error {
 public:
  Error(const char* kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  const char* kind() const noexcept { return kind_; }

 private:
  const char* kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

class AdaptationError : public Error {
 public:
  AdaptationError(std::size_t batch, const std::string& what)
      : Error("adaptation", "batch " + std::to_string(batch) + ": " + what), batch_(batch) {}
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t batch_;
};

class UndefinedMetricError : public Error {
 public:
  explicit UndefinedMetricError(const std::string& what) : Error("undefined_metric", what) {}
};

class ReportError : public Error {
 public:
  explicit ReportError(const std::string& what) : Error("report", what) {}
};

}  // namespace neuroadapt
