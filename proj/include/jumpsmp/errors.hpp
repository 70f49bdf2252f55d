#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace jumpsmp {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (bad sizes, out-of-range values).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Configuration file or command line could not be turned into a valid experiment.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Anything that goes wrong while the numerics are running.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class EmptyProbeSet : public InvalidArgument {
 public:
  EmptyProbeSet() : InvalidArgument("validation probe set is empty") {}
};

class NonFiniteEvaluation : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonFiniteState : public NumericalError {
 public:
  NonFiniteState(std::size_t path, std::size_t step)
      : NumericalError("non-finite state on path " + std::to_string(path) + " at step " +
                       std::to_string(step)),
        path_(path),
        step_(step) {}

  std::size_t path() const noexcept { return path_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t path_;
  std::size_t step_;
};

class SingularJumpCoefficient : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class InsufficientPaths : public NumericalError {
 public:
  InsufficientPaths(std::size_t have, std::size_t need)
      : NumericalError("regression needs at least " + std::to_string(need) + " paths, got " +
                       std::to_string(have)) {}
};

class ContractionFailure : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonAdaptedIntegrand : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class JumpDependentFunctional : public NumericalError {
 public:
  JumpDependentFunctional()
      : NumericalError("Clark-Ocone reconstruction only covers functionals without jump integrals") {}
};

class UnsupportedNode : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class ReplayMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace jumpsmp
