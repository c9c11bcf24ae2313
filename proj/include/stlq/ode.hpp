#pragma once

#include <functional>
#include <string>

#include "stlq/errors.hpp"
#include "stlq/matrix_path.hpp"

namespace stlq {

enum class Direction { Forward, Backward };

/// Right-hand side of a matrix ODE: (t, M) -> dM/dt.
using OdeField = std::function<Matrix(double, const Matrix&)>;

/// Optional transform applied to the state after each accepted step
/// (e.g. symmetrization of a Riccati solution).
using PostStep = std::function<Matrix(const Matrix&)>;

/// Classical 4th-order Runge-Kutta over the grid nodes. For Backward the
/// boundary value is pinned at t_N, for Forward at t_0; the boundary node is
/// stored exactly as given. Throws NonFiniteError if any stage blows up.
inline MatrixPath rk4_integrate(const OdeField& field, const Matrix& boundary,
                                Direction direction, const TimeGrid& grid,
                                const PostStep& post_step = {}) {
  if (!boundary.allFinite()) throw NonFiniteError("rk4_integrate: non-finite boundary value");
  MatrixPath out(grid, static_cast<int>(boundary.rows()), static_cast<int>(boundary.cols()));
  const int n_steps = grid.steps();
  const double dt = grid.dt();
  const bool forward = direction == Direction::Forward;
  const double h = forward ? dt : -dt;

  int idx = forward ? 0 : n_steps;
  out.set(idx, boundary);
  Matrix y = boundary;
  for (int s = 0; s < n_steps; ++s) {
    const double t = grid.node(idx);
    const Matrix k1 = field(t, y);
    const Matrix k2 = field(t + 0.5 * h, y + (0.5 * h) * k1);
    const Matrix k3 = field(t + 0.5 * h, y + (0.5 * h) * k2);
    const Matrix k4 = field(t + h, y + h * k3);
    y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!y.allFinite())
      throw NonFiniteError("rk4_integrate: non-finite state near t = " + std::to_string(t + h));
    if (post_step) y = post_step(y);
    idx += forward ? 1 : -1;
    out.set(idx, y);
  }
  return out;
}

/// State transition matrix of dPhi/dt = A(t) Phi, Phi(0) = I, stored at every
/// node. Phi(0) is exactly the identity.
inline MatrixPath transition_matrix(const MatrixPath& system, const TimeGrid& grid) {
  if (system.rows() != system.cols())
    throw ShapeMismatchError("transition_matrix: system matrices must be square");
  const int n = system.rows();
  auto field = [&system](double t, const Matrix& phi) -> Matrix { return system.eval(t) * phi; };
  return rk4_integrate(field, Matrix::Identity(n, n), Direction::Forward, grid);
}

}  // namespace stlq
