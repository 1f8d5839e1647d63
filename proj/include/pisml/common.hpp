#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pisml {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual std::string_view tag() const noexcept { return "error"; }
};

/// Bad arguments, dimension mismatches, schema violations.
class ValidationError : public Error {
 public:
  using Error::Error;
  std::string_view tag() const noexcept override { return "validation"; }
};

class MissingFileError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  std::string_view tag() const noexcept override { return "missing-file"; }
};

class NumericalError : public Error {
 public:
  using Error::Error;
  std::string_view tag() const noexcept override { return "numerical"; }
};

/// A state became non-finite or exceeded the blow-up bound.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, double time)
      : NumericalError(what), time_(time) {}
  double time() const noexcept { return time_; }
  std::string_view tag() const noexcept override { return "divergence"; }

 private:
  double time_;
};

/// Adaptive step size fell below the minimum step.
class StiffnessError : public NumericalError {
 public:
  using NumericalError::NumericalError;
  std::string_view tag() const noexcept override { return "stiffness"; }
};

class NoEquilibriumError : public NumericalError {
 public:
  using NumericalError::NumericalError;
  std::string_view tag() const noexcept override { return "no-equilibrium"; }
};

class TrainingFailedError : public NumericalError {
 public:
  using NumericalError::NumericalError;
  std::string_view tag() const noexcept override { return "training-failed"; }
};

inline constexpr double kPi = 3.14159265358979323846;

/// 64-bit FNV-1a, used for content hashes of configs and libraries.
inline std::uint64_t fnv1a64(std::string_view data,
                             std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v);

/// `git describe` of the source tree at configure time.
std::string_view git_describe() noexcept;

}  // namespace pisml
