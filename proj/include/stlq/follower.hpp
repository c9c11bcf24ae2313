#pragma once

#include <string>
#include <vector>

#include "stlq/coefficients.hpp"
#include "stlq/ode.hpp"
#include "stlq/problem.hpp"

namespace stlq {

/// Follower feedback gains: u = K_x x + K_w w + K_phi phi.
struct FollowerGains {
  MatrixPath K_x;    // k1 x n
  MatrixPath K_w;    // k1 x k2
  MatrixPath K_phi;  // k1 x n
};

struct FollowerSolution {
  MatrixPath P;  // n x n symmetric, P(T) = G1 exactly
  FollowerGains gains;
};

/// Adjoint pair along one trajectory: q = -P x - phi and the d diffusion
/// costates k^j = -P (C^j x + D1^j u + D2^j w).
struct AdjointPath {
  MatrixPath q;                 // n x 1
  std::vector<MatrixPath> k;    // d of n x 1
};

/// Backward Riccati solve for the follower's P, symmetrized after each step.
inline MatrixPath solve_riccati_P(const ProblemData& data,
                                  double rcond_floor = kDefaultRcondFloor) {
  const int d = data.dims.d;
  auto field = [&data, d, rcond_floor](double t, const Matrix& P) -> Matrix {
    const Matrix A = data.A.eval(t);
    const Matrix B1 = data.B1.eval(t);
    const Matrix S1 = data.S1.eval(t);
    Matrix R1t = data.R1.eval(t);
    Matrix L = B1.transpose() * P + S1;
    Matrix quadC = Matrix::Zero(P.rows(), P.cols());
    for (int j = 0; j < d; ++j) {
      const Matrix Cj = data.C[static_cast<std::size_t>(j)].eval(t);
      const Matrix D1j = data.D1[static_cast<std::size_t>(j)].eval(t);
      R1t += D1j.transpose() * P * D1j;
      L += D1j.transpose() * P * Cj;
      quadC += Cj.transpose() * P * Cj;
    }
    const Matrix R1t_inv_L =
        solve_linear(enforce_symmetry(R1t), L, rcond_floor, "R1 tilde at t = " + std::to_string(t));
    return -(A.transpose() * P + P * A + quadC + data.Q1.eval(t) - L.transpose() * R1t_inv_L);
  };
  return rk4_integrate(field, data.G1, Direction::Backward, data.grid,
                       [](const Matrix& m) { return enforce_symmetry(m); });
}

/// Feedback gains from P.
inline FollowerGains follower_gains(const MatrixPath& P, const ProblemData& data,
                                    double rcond_floor = kDefaultRcondFloor) {
  const Dims& dims = data.dims;
  const TimeGrid grid = P.grid();
  FollowerGains g{MatrixPath(grid, dims.k1, dims.n), MatrixPath(grid, dims.k1, dims.k2),
                  MatrixPath(grid, dims.k1, dims.n)};
  for (int i = 0; i < grid.node_count(); ++i) {
    const Matrix& Pi = P[i];
    const Matrix B1 = data.B1[i];
    Matrix R1t = data.R1[i];
    Matrix L = B1.transpose() * Pi + data.S1[i];
    Matrix DPD2 = Matrix::Zero(dims.k1, dims.k2);
    for (int j = 0; j < dims.d; ++j) {
      const Matrix& Cj = data.C[static_cast<std::size_t>(j)][i];
      const Matrix& D1j = data.D1[static_cast<std::size_t>(j)][i];
      const Matrix& D2j = data.D2[static_cast<std::size_t>(j)][i];
      R1t += D1j.transpose() * Pi * D1j;
      L += D1j.transpose() * Pi * Cj;
      DPD2 += D1j.transpose() * Pi * D2j;
    }
    R1t = enforce_symmetry(R1t);
    const std::string label = "R1 tilde at t = " + std::to_string(grid.node(i));
    g.K_x.set(i, -solve_linear(R1t, L, rcond_floor, label));
    g.K_w.set(i, -solve_linear(R1t, DPD2, rcond_floor, label));
    g.K_phi.set(i, -solve_linear(R1t, Matrix(B1.transpose()), rcond_floor, label));
  }
  return g;
}

inline FollowerSolution solve_follower(const ProblemData& data,
                                       double rcond_floor = kDefaultRcondFloor) {
  MatrixPath P = solve_riccati_P(data, rcond_floor);
  FollowerGains gains = follower_gains(P, data, rcond_floor);
  return FollowerSolution{std::move(P), std::move(gains)};
}

/// Backward solve of the affine term for a given leader control path w:
/// dphi/dt = -(A~' phi + Gamma w), phi(T) = 0.
inline MatrixPath solve_phi(const TildeCoefficients& tilde, const MatrixPath& w) {
  const TimeGrid grid = tilde.grid;
  const int n = tilde.A.rows();
  if (w.cols() != 1 || w.rows() != tilde.Gamma.cols())
    throw ShapeMismatchError("solve_phi: w must be a k2-vector path");
  auto field = [&tilde, &w](double t, const Matrix& phi) -> Matrix {
    return -(tilde.A.eval(t).transpose() * phi + tilde.Gamma.eval(t) * w.eval(t));
  };
  return rk4_integrate(field, Matrix::Zero(n, 1), Direction::Backward, grid);
}

/// Optimal value of the follower problem for leader control w, by completion
/// of squares; trapezoid quadrature on the grid. Requires R1 tilde > 0.
inline double follower_value(const MatrixPath& P, const MatrixPath& phi, const MatrixPath& w,
                             const ProblemData& data, double rcond_floor = kDefaultRcondFloor) {
  const TimeGrid grid = P.grid();
  const Vector& x0 = data.x0;
  const int d = data.dims.d;
  std::vector<double> integrand(static_cast<std::size_t>(grid.node_count()));
  for (int i = 0; i < grid.node_count(); ++i) {
    const Matrix& Pi = P[i];
    const Vector wi = w[i].col(0);
    const Vector phii = phi[i].col(0);
    Matrix R1t = data.R1[i];
    Matrix DPD2 = Matrix::Zero(data.dims.k1, data.dims.k2);
    double quad_w = 0.0;  // sum_j <P D2^j w, D2^j w>
    for (int j = 0; j < d; ++j) {
      const Matrix& D1j = data.D1[static_cast<std::size_t>(j)][i];
      const Matrix& D2j = data.D2[static_cast<std::size_t>(j)][i];
      R1t += D1j.transpose() * Pi * D1j;
      DPD2 += D1j.transpose() * Pi * D2j;
      const Vector dw = D2j * wi;
      quad_w += dw.dot(Pi * dw);
    }
    R1t = enforce_symmetry(R1t);
    if (min_eigenvalue(R1t) <= 0.0)
      throw IllConditionedError("follower_value: R1 tilde not positive definite at t = " +
                                std::to_string(grid.node(i)));
    const Vector m = data.B1[i].transpose() * phii + DPD2 * wi;
    const Vector r1t_inv_m = solve_linear(R1t, m, rcond_floor, "R1 tilde").col(0);
    integrand[static_cast<std::size_t>(i)] =
        2.0 * phii.dot(data.B2[i] * wi) + quad_w - m.dot(r1t_inv_m);
  }
  double integral = 0.0;
  for (int i = 0; i < grid.steps(); ++i)
    integral += 0.5 * grid.dt() *
                (integrand[static_cast<std::size_t>(i)] + integrand[static_cast<std::size_t>(i + 1)]);
  const Vector phi0 = phi[0].col(0);
  return 0.5 * x0.dot(P[0] * x0) + phi0.dot(x0) + 0.5 * integral;
}

/// q = -P x - phi, k^j = -P (C^j x + D1^j u + D2^j w) along one trajectory.
inline AdjointPath reconstruct_adjoint(const MatrixPath& P, const MatrixPath& phi,
                                       const MatrixPath& state, const MatrixPath& u,
                                       const MatrixPath& w, const ProblemData& data) {
  const TimeGrid grid = P.grid();
  const int n = data.dims.n, d = data.dims.d;
  AdjointPath adj{MatrixPath(grid, n, 1),
                  std::vector<MatrixPath>(static_cast<std::size_t>(d), MatrixPath(grid, n, 1))};
  for (int i = 0; i < grid.node_count(); ++i) {
    adj.q.set(i, -P[i] * state[i] - phi[i]);
    for (int j = 0; j < d; ++j) {
      const Matrix diff = data.C[static_cast<std::size_t>(j)][i] * state[i] +
                          data.D1[static_cast<std::size_t>(j)][i] * u[i] +
                          data.D2[static_cast<std::size_t>(j)][i] * w[i];
      adj.k[static_cast<std::size_t>(j)].set(i, -P[i] * diff);
    }
  }
  return adj;
}

/// Sup over nodes of |R1 u + S1 x - B1' q - sum_j (D1^j)' k^j|.
inline double follower_stationarity_residual(const AdjointPath& adjoint, const MatrixPath& state,
                                             const MatrixPath& u, const ProblemData& data) {
  const TimeGrid grid = state.grid();
  double sup = 0.0;
  for (int i = 0; i < grid.node_count(); ++i) {
    Matrix r = data.R1[i] * u[i] + data.S1[i] * state[i] - data.B1[i].transpose() * adjoint.q[i];
    for (int j = 0; j < data.dims.d; ++j)
      r -= data.D1[static_cast<std::size_t>(j)][i].transpose() *
           adjoint.k[static_cast<std::size_t>(j)][i];
    sup = std::max(sup, r.cwiseAbs().maxCoeff());
  }
  return sup;
}

/// Centered finite-difference residual of P in its Riccati equation
/// (diagnostic; interior nodes only).
inline double riccati_fd_residual(const MatrixPath& P, const ProblemData& data,
                                  double rcond_floor = kDefaultRcondFloor) {
  const TimeGrid grid = P.grid();
  const int d = data.dims.d;
  double sup = 0.0;
  for (int i = 1; i < grid.steps(); ++i) {
    const Matrix Pdot = (P[i + 1] - P[i - 1]) / (2.0 * grid.dt());
    const Matrix& Pi = P[i];
    const Matrix A = data.A[i];
    const Matrix B1 = data.B1[i];
    Matrix R1t = data.R1[i];
    Matrix L = B1.transpose() * Pi + data.S1[i];
    Matrix quadC = Matrix::Zero(Pi.rows(), Pi.cols());
    for (int j = 0; j < d; ++j) {
      const Matrix& Cj = data.C[static_cast<std::size_t>(j)][i];
      const Matrix& D1j = data.D1[static_cast<std::size_t>(j)][i];
      R1t += D1j.transpose() * Pi * D1j;
      L += D1j.transpose() * Pi * Cj;
      quadC += Cj.transpose() * Pi * Cj;
    }
    const Matrix R1t_inv_L = solve_linear(enforce_symmetry(R1t), L, rcond_floor, "R1 tilde");
    const Matrix res = Pdot + A.transpose() * Pi + Pi * A + quadC + data.Q1[i] -
                       L.transpose() * R1t_inv_L;
    sup = std::max(sup, res.cwiseAbs().maxCoeff());
  }
  return sup;
}

}  // namespace stlq
