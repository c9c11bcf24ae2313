#pragma once

#include <stdexcept>
#include <string>

namespace stlq {

/// An ODE stage, linear solve input, or simulated path produced NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A guarded linear solve saw a reciprocal condition number below the
/// configured floor. Signals a violated invertibility hypothesis rather
/// than a numerical bug.
class IllConditionedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotSymmetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The two-point boundary value problem has no usable solution: the
/// determinant condition on the transition matrix failed.
class SolverInfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input document (problem file).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stlq
