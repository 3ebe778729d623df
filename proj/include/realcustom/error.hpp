#pragma once

#include <stdexcept>
#include <string>

namespace realcustom {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kSemantic = 3,
  kCapacity = 4,
  kNumeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Bad command line or configuration file.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

/// Inputs are well formed but inconsistent (unknown target word, wrong shape).
class SemanticError : public Error {
 public:
  explicit SemanticError(const std::string& what)
      : Error(what, ExitCode::kSemantic) {}
};

class ShapeError : public SemanticError {
 public:
  explicit ShapeError(const std::string& what) : SemanticError(what) {}
};

/// The per-subject Top-K budgets do not fit on the mask grid.
class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& what)
      : Error(what, ExitCode::kCapacity) {}
};

/// NaN/Inf produced where a finite value is required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(what, ExitCode::kNumeric) {}
};

/// Malformed or corrupted file.
class FormatError : public SemanticError {
 public:
  explicit FormatError(const std::string& what) : SemanticError(what) {}
};

}  // namespace realcustom
