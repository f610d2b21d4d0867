#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace katosde {

/// Base of every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad parameters to a constructor or operation (violated inequality is named).
struct ValidationError : Error {
  using Error::Error;
};

/// Input outside the mathematical domain of an operation.
struct DomainError : Error {
  using Error::Error;
};

/// Configuration files and CLI wiring. The CLI maps this to exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

/// NaN or other non-finite value that cannot be repaired by the cap policy.
struct NumericError : Error {
  double t;
  std::vector<double> x;
  NumericError(const std::string& what, double t_, std::vector<double> x_)
      : Error(what), t(t_), x(std::move(x_)) {}
};

/// Adaptive refinement did not settle within its level budget.
struct AccuracyError : Error {
  double last_estimate;
  double previous_estimate;
  AccuracyError(const std::string& what, double last, double prev)
      : Error(what), last_estimate(last), previous_estimate(prev) {}
};

struct InsufficientDataError : Error {
  using Error::Error;
};

struct HorizonNotFoundError : Error {
  using Error::Error;
};

struct ContractionViolationError : Error {
  std::vector<double> ratios;
  ContractionViolationError(const std::string& what, std::vector<double> r)
      : Error(what), ratios(std::move(r)) {}
};

struct NoConvergenceError : Error {
  std::vector<double> increments;
  NoConvergenceError(const std::string& what, std::vector<double> inc)
      : Error(what), increments(std::move(inc)) {}
};

/// A required upstream certificate is missing or failed.
struct PreconditionError : Error {
  using Error::Error;
};

}  // namespace katosde
