#pragma once

#include <stdexcept>
#include <string>

namespace acelab {

/// Operand shapes are incompatible for the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A numeric function was evaluated outside its domain (e.g. unguarded log(0)).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A loss became non-finite during optimization.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Synthetic data generation could not satisfy its constraints.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An adversarial attack hit a non-finite gradient.
class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage could not find an artifact produced by an earlier stage.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An experiment configuration failed schema validation.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reading or writing an artifact failed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace acelab
