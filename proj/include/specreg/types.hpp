#ifndef SPECREG_TYPES_HPP
#define SPECREG_TYPES_HPP

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace specreg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Raised when a caller breaks an operation's precondition (dimensions,
/// parameter ranges). Distinct from numerical failure.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produced or received non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

inline void require_dim(Index actual, Index expected, const char* what) {
  if (actual != expected) {
    throw ContractViolation(std::string(what) + ": expected length " + std::to_string(expected) +
                            ", got " + std::to_string(actual));
  }
}

inline void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw NumericalError(std::string(what) + ": non-finite entries");
}

}  // namespace specreg

#endif  // SPECREG_TYPES_HPP
