#pragma once

#include <stdexcept>
#include <string>

namespace ikdmil {

// Error taxonomy. Everything user-facing derives from std::runtime_error so
// the CLI can catch one base, print the message, and exit nonzero.

// Bad configuration values, unknown identifiers, length mismatches.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Spatial / tensor shape mismatches; message reports expected vs. actual.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Two models that should be structurally identical are not.
struct IncompatibilityError : std::runtime_error {
  explicit IncompatibilityError(const std::string& msg) : std::runtime_error(msg) {}
};

// An operation's stated precondition does not hold.
struct PreconditionError : std::runtime_error {
  explicit PreconditionError(const std::string& msg) : std::runtime_error(msg) {}
};

// A usage contract was broken (gt-mask quarantine, frozen-teacher mutation).
struct ContractViolation : std::runtime_error {
  explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborted (non-finite loss, empty dataset mid-run, ...).
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / serialization problems.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Synthetic data generation could not satisfy its own constraints.
struct GenerationError : std::runtime_error {
  explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ikdmil
