#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dpdf {

/// A caller broke a documented precondition (shape, arity, configuration).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An argument lies outside the mathematical domain of a function.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A residual fell outside a bounded support along one dimension.
class RangeError : public std::out_of_range {
 public:
  RangeError(std::size_t dim, double value, const std::string& what)
      : std::out_of_range(what), dim_(dim), value_(value) {}

  std::size_t dim() const noexcept { return dim_; }
  double value() const noexcept { return value_; }

 private:
  std::size_t dim_;
  double value_;
};

/// A computation produced a non-finite value.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, std::ptrdiff_t layer = -1)
      : std::runtime_error(what), layer_(layer) {}

  /// Index of the flow layer that failed, or -1 when not layer-specific.
  std::ptrdiff_t layer() const noexcept { return layer_; }

 private:
  std::ptrdiff_t layer_;
};

/// Malformed or foreign file content.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dpdf
