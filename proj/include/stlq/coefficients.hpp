#pragma once

#include <string>
#include <vector>

#include "stlq/problem.hpp"

namespace stlq {

/// Coefficients of the leader's state system after the follower's feedback
/// has been substituted. All multi-noise products are summed over Brownian
/// channels.
struct TildeCoefficients {
  TimeGrid grid;
  MatrixPath R1;              // k1 x k1, R1 + sum_j (D1^j)' P D1^j
  MatrixPath A;               // n x n
  MatrixPath B1;              // n x n, symmetric negative semidefinite
  MatrixPath B2;              // n x k2
  std::vector<MatrixPath> C;   // d of n x n
  std::vector<MatrixPath> D1;  // d of n x n
  std::vector<MatrixPath> D2;  // d of n x k2
  MatrixPath Gamma;           // n x k2
  std::vector<double> r1_rcond;  // per node, rcond of R1 tilde (A2.1 margin)

  double min_r1_rcond() const {
    double m = std::numeric_limits<double>::infinity();
    for (double r : r1_rcond) m = std::min(m, r);
    return m;
  }
};

/// Derived coefficient families entering the leader's Riccati equation and
/// the boundary value problem.
struct BarCoefficients {
  TimeGrid grid;
  MatrixPath S2;     // k2 x n  (S2 bar)
  MatrixPath Gamma;  // n x n   (Gamma bar)
  MatrixPath B1;     // n x n   (B1 bar)
  MatrixPath B2;     // n x n   (B2 bar)
  MatrixPath D1;     // n x n   (D1 bar)
  MatrixPath Q2t;    // n x n   (Q2 tilde)
  MatrixPath S2t;    // k2 x n  (S2 tilde)
  MatrixPath R2t;    // k2 x k2 (R2 tilde)
  MatrixPath D2PD1;  // k2 x n, sum_j (D2~^j)'(P1+P2) D1~^j
  std::vector<double> r2_rcond;  // per node, rcond of R2 tilde (A2.4 margin)

  double min_r2_rcond() const {
    double m = std::numeric_limits<double>::infinity();
    for (double r : r2_rcond) m = std::min(m, r);
    return m;
  }
};

/// Nodewise construction of the tilde family from the follower's Riccati
/// solution P. Throws IllConditionedError naming the node time if
/// R1 + (D1)'P D1 is not invertible there (A2.1).
inline TildeCoefficients build_tilde(const MatrixPath& P, const ProblemData& data,
                                     double rcond_floor = kDefaultRcondFloor) {
  const Dims& dims = data.dims;
  const int n = dims.n, k1 = dims.k1, k2 = dims.k2, d = dims.d;
  const TimeGrid grid = P.grid();
  if (P.rows() != n || P.cols() != n) throw ShapeMismatchError("build_tilde: P must be n x n");

  TildeCoefficients tc{grid,
                       MatrixPath(grid, k1, k1),
                       MatrixPath(grid, n, n),
                       MatrixPath(grid, n, n),
                       MatrixPath(grid, n, k2),
                       std::vector<MatrixPath>(d, MatrixPath(grid, n, n)),
                       std::vector<MatrixPath>(d, MatrixPath(grid, n, n)),
                       std::vector<MatrixPath>(d, MatrixPath(grid, n, k2)),
                       MatrixPath(grid, n, k2),
                       std::vector<double>(static_cast<std::size_t>(grid.node_count()), 0.0)};

  for (int i = 0; i < grid.node_count(); ++i) {
    const Matrix& Pi = P[i];
    const Matrix A = data.A[i];
    const Matrix B1 = data.B1[i];
    const Matrix B2 = data.B2[i];
    const Matrix S1 = data.S1[i];

    Matrix R1t = data.R1[i];
    Matrix L = B1.transpose() * Pi + S1;      // k1 x n
    Matrix DPD2 = Matrix::Zero(k1, k2);       // sum_j (D1^j)' P D2^j
    Matrix CPD2 = Matrix::Zero(n, k2);        // sum_j (C^j)' P D2^j
    Matrix CPD1 = Matrix::Zero(n, k1);        // sum_j (C^j)' P D1^j
    for (int j = 0; j < d; ++j) {
      const Matrix& Cj = data.C[static_cast<std::size_t>(j)][i];
      const Matrix& D1j = data.D1[static_cast<std::size_t>(j)][i];
      const Matrix& D2j = data.D2[static_cast<std::size_t>(j)][i];
      R1t += D1j.transpose() * Pi * D1j;
      L += D1j.transpose() * Pi * Cj;
      DPD2 += D1j.transpose() * Pi * D2j;
      CPD2 += Cj.transpose() * Pi * D2j;
      CPD1 += Cj.transpose() * Pi * D1j;
    }
    R1t = enforce_symmetry(R1t);

    const double rc = rcond(R1t);
    tc.r1_rcond[static_cast<std::size_t>(i)] = rc;
    const std::string label = "R1 tilde at t = " + std::to_string(grid.node(i));
    const Matrix R1t_inv_L = solve_linear(R1t, L, rcond_floor, label);
    const Matrix R1t_inv_B1t = solve_linear(R1t, Matrix(B1.transpose()), rcond_floor, label);
    const Matrix R1t_inv_DPD2 = solve_linear(R1t, DPD2, rcond_floor, label);

    tc.R1.set(i, R1t);
    tc.A.set(i, A - B1 * R1t_inv_L);
    tc.B1.set(i, enforce_symmetry(-B1 * R1t_inv_B1t));
    tc.B2.set(i, B2 - B1 * R1t_inv_DPD2);
    for (int j = 0; j < d; ++j) {
      const Matrix& Cj = data.C[static_cast<std::size_t>(j)][i];
      const Matrix& D1j = data.D1[static_cast<std::size_t>(j)][i];
      const Matrix& D2j = data.D2[static_cast<std::size_t>(j)][i];
      tc.C[static_cast<std::size_t>(j)].set(i, Cj - D1j * R1t_inv_L);
      tc.D1[static_cast<std::size_t>(j)].set(i, -D1j * R1t_inv_B1t);
      tc.D2[static_cast<std::size_t>(j)].set(i, D2j - D1j * R1t_inv_DPD2);
    }
    // Gamma = P B2 + sum_j (C^j)'P D2^j - [P B1 + sum_j (C^j)'P D1^j + S1'] (R1~)^{-1} sum_j (D1^j)'P D2^j
    tc.Gamma.set(i, Pi * B2 + CPD2 - (Pi * B1 + CPD1 + S1.transpose()) * R1t_inv_DPD2);
  }
  return tc;
}

/// Nodewise construction of the bar family and leader weights from the
/// leader's Riccati pair. Throws IllConditionedError if A2.4 fails at a node.
inline BarCoefficients build_bar(const MatrixPath& P1, const MatrixPath& P2,
                                 const TildeCoefficients& tilde, const ProblemData& data,
                                 double rcond_floor = kDefaultRcondFloor) {
  const Dims& dims = data.dims;
  const int n = dims.n, k2 = dims.k2, d = dims.d;
  const TimeGrid grid = tilde.grid;
  if (P1.rows() != n || P2.rows() != n)
    throw ShapeMismatchError("build_bar: Riccati paths must be n x n");

  BarCoefficients bc{grid,
                     MatrixPath(grid, k2, n),
                     MatrixPath(grid, n, n),
                     MatrixPath(grid, n, n),
                     MatrixPath(grid, n, n),
                     MatrixPath(grid, n, n),
                     MatrixPath(grid, n, n),
                     MatrixPath(grid, k2, n),
                     MatrixPath(grid, k2, k2),
                     MatrixPath(grid, k2, n),
                     std::vector<double>(static_cast<std::size_t>(grid.node_count()), 0.0)};

  for (int i = 0; i < grid.node_count(); ++i) {
    const Matrix PS = P1[i] + P2[i];
    const Matrix& At = tilde.A[i];
    const Matrix& Bt1 = tilde.B1[i];
    const Matrix& Bt2 = tilde.B2[i];
    const Matrix& Gam = tilde.Gamma[i];

    Matrix R2t = data.R2[i];
    Matrix D2PC = Matrix::Zero(k2, n);   // sum_j (D2~^j)' PS C~^j
    Matrix D2PD1 = Matrix::Zero(k2, n);  // sum_j (D2~^j)' PS D1~^j
    Matrix CPD1 = Matrix::Zero(n, n);    // sum_j (C~^j)' PS D1~^j
    Matrix CPC = Matrix::Zero(n, n);     // sum_j (C~^j)' PS C~^j
    Matrix D1PD1 = Matrix::Zero(n, n);   // sum_j (D1~^j)' PS D1~^j
    for (int j = 0; j < d; ++j) {
      const Matrix& Ctj = tilde.C[static_cast<std::size_t>(j)][i];
      const Matrix& Dt1j = tilde.D1[static_cast<std::size_t>(j)][i];
      const Matrix& Dt2j = tilde.D2[static_cast<std::size_t>(j)][i];
      R2t += Dt2j.transpose() * PS * Dt2j;
      D2PC += Dt2j.transpose() * PS * Ctj;
      D2PD1 += Dt2j.transpose() * PS * Dt1j;
      CPD1 += Ctj.transpose() * PS * Dt1j;
      CPC += Ctj.transpose() * PS * Ctj;
      D1PD1 += Dt1j.transpose() * PS * Dt1j;
    }
    R2t = enforce_symmetry(R2t);

    bc.r2_rcond[static_cast<std::size_t>(i)] = rcond(R2t);
    const std::string label = "R2 tilde at t = " + std::to_string(grid.node(i));
    const Matrix S2bar = Bt2.transpose() * P1[i] + D2PC + data.S2[i];  // k2 x n
    const Matrix R2t_inv_D2PD1 = solve_linear(R2t, D2PD1, rcond_floor, label);
    const Matrix R2t_inv_S2bar = solve_linear(R2t, S2bar, rcond_floor, label);

    bc.S2.set(i, S2bar);
    bc.Gamma.set(i, Gam * R2t_inv_D2PD1);
    bc.B1.set(i, P1[i] * Bt1 + CPD1 - S2bar.transpose() * R2t_inv_D2PD1);
    bc.B2.set(i, Bt1 - Bt2 * R2t_inv_D2PD1);
    bc.D1.set(i, D1PD1 - D2PD1.transpose() * R2t_inv_D2PD1);
    bc.Q2t.set(i, enforce_symmetry(data.Q2[i] + CPC));
    bc.S2t.set(i, data.S2[i] + D2PC);
    bc.R2t.set(i, R2t);
    bc.D2PD1.set(i, D2PD1);
  }
  return bc;
}

}  // namespace stlq
