#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stlq/coefficients.hpp"
#include "stlq/follower.hpp"
#include "stlq/ode.hpp"

namespace stlq {

/// Solutions of the leader's Riccati system. calP solves the linear
/// (Lyapunov) equation for P1 + P2; P1 solves the decoupled Riccati
/// equation; P2 = calP - P1. coupled_deviation records the max distance
/// between this construction and a direct backward integration of the
/// original coupled pair.
struct LeaderRiccati {
  MatrixPath calP;
  MatrixPath P1;
  MatrixPath P2;
  double coupled_deviation = 0.0;
};

/// Block system of the two-point boundary value problem for
/// X = (E x*, E p), Y = (phi*, phi).
struct BVPSystem {
  MatrixPath blockA;     // 2n x 2n
  MatrixPath blockB;     // 2n x 2n
  MatrixPath blockAhat;  // 2n x 2n
  MatrixPath blockBhat;  // 2n x 2n
  MatrixPath curlyA;     // 4n x 4n
  MatrixPath Phi;        // 4n x 4n transition matrices
};

struct BVPSolution {
  MatrixPath Ex;       // n x 1
  MatrixPath Ep;       // n x 1
  MatrixPath phiStar;  // n x 1
  MatrixPath phi;      // n x 1
  double terminal_residual = 0.0;  // |Y(T)|
};

/// Leader feedback gains: w* = L_Ex Ex + L_phiStar phi* + L_Ep Ep + L_phi phi.
struct LeaderGains {
  MatrixPath L_Ex;       // k2 x n
  MatrixPath L_phiStar;  // k2 x n
  MatrixPath L_Ep;       // k2 x n
  MatrixPath L_phi;      // k2 x n
};

struct LeaderSolution {
  BVPSolution bvp;
  MatrixPath w_star;  // k2 x 1
  LeaderGains gains;
};

/// Backward Lyapunov solve for calP = P1 + P2:
/// dcalP/dt = -(calP A~ + A~' calP + sum_j (C~^j)' calP C~^j + Q2), calP(T) = G2.
inline MatrixPath solve_calP(const TildeCoefficients& tilde, const ProblemData& data) {
  const int d = data.dims.d;
  auto field = [&tilde, &data, d](double t, const Matrix& P) -> Matrix {
    const Matrix At = tilde.A.eval(t);
    Matrix quad = Matrix::Zero(P.rows(), P.cols());
    for (int j = 0; j < d; ++j) {
      const Matrix Ctj = tilde.C[static_cast<std::size_t>(j)].eval(t);
      quad += Ctj.transpose() * P * Ctj;
    }
    return -(P * At + At.transpose() * P + quad + data.Q2.eval(t));
  };
  return rk4_integrate(field, data.G2, Direction::Backward, tilde.grid);
}

/// Backward solve of the decoupled Riccati equation for P1 using the leader
/// weights (Q2~, S2~, R2~) embedded in `bar`; symmetrized after each step.
inline MatrixPath solve_P1(const MatrixPath& calP, const TildeCoefficients& tilde,
                           const BarCoefficients& bar, const ProblemData& data,
                           double rcond_floor = kDefaultRcondFloor) {
  (void)calP;  // weights already carry calP through bar
  auto field = [&tilde, &bar, rcond_floor](double t, const Matrix& P1) -> Matrix {
    const Matrix At = tilde.A.eval(t);
    const Matrix Bt2 = tilde.B2.eval(t);
    const Matrix L = Bt2.transpose() * P1 + bar.S2t.eval(t);  // k2 x n
    const Matrix R2t_inv_L = solve_linear(enforce_symmetry(bar.R2t.eval(t)), L, rcond_floor,
                                          "R2 tilde at t = " + std::to_string(t));
    return -(P1 * At + At.transpose() * P1 + bar.Q2t.eval(t) - L.transpose() * R2t_inv_L);
  };
  return rk4_integrate(field, data.G2, Direction::Backward, tilde.grid,
                       [](const Matrix& m) { return enforce_symmetry(m); });
}

/// P2 = calP - P1 nodewise, plus a mandatory cross-check: the original
/// coupled Riccati pair is integrated backward as one stacked system and the
/// max deviation from (P1, P2) is recorded.
inline LeaderRiccati compute_P2(const MatrixPath& calP, const MatrixPath& P1,
                                const TildeCoefficients& tilde, const ProblemData& data,
                                double rcond_floor = kDefaultRcondFloor) {
  const TimeGrid grid = calP.grid();
  const int n = data.dims.n, d = data.dims.d;
  MatrixPath P2(grid, n, n);
  for (int i = 0; i < grid.node_count(); ++i) P2.set(i, calP[i] - P1[i]);

  // Direct integration of the coupled pair, stacked as [P1; P2].
  auto field = [&tilde, &data, n, d, rcond_floor](double t, const Matrix& W) -> Matrix {
    const Matrix P1c = W.topRows(n);
    const Matrix P2c = W.bottomRows(n);
    const Matrix PS = P1c + P2c;
    const Matrix At = tilde.A.eval(t);
    const Matrix Bt2 = tilde.B2.eval(t);
    Matrix R2t = data.R2.eval(t);
    Matrix Sbar = Bt2.transpose() * P1c + data.S2.eval(t);
    Matrix quadC = Matrix::Zero(n, n);
    for (int j = 0; j < d; ++j) {
      const Matrix Ctj = tilde.C[static_cast<std::size_t>(j)].eval(t);
      const Matrix Dt2j = tilde.D2[static_cast<std::size_t>(j)].eval(t);
      R2t += Dt2j.transpose() * PS * Dt2j;
      Sbar += Dt2j.transpose() * PS * Ctj;
      quadC += Ctj.transpose() * PS * Ctj;
    }
    const Matrix R2t_inv_Sbar = solve_linear(enforce_symmetry(R2t), Sbar, rcond_floor,
                                             "coupled R2 tilde at t = " + std::to_string(t));
    const Matrix quad = Sbar.transpose() * R2t_inv_Sbar;
    Matrix out(2 * n, n);
    out.topRows(n) = -(P1c * At + At.transpose() * P1c + quadC + data.Q2.eval(t) - quad);
    out.bottomRows(n) = -(P2c * At + At.transpose() * P2c + quad);
    return out;
  };
  Matrix terminal(2 * n, n);
  terminal.topRows(n) = data.G2;
  terminal.bottomRows(n) = Matrix::Zero(n, n);
  const MatrixPath coupled = rk4_integrate(field, terminal, Direction::Backward, grid);

  double dev = 0.0;
  for (int i = 0; i < grid.node_count(); ++i) {
    dev = std::max(dev, (coupled[i].topRows(n) - P1[i]).cwiseAbs().maxCoeff());
    dev = std::max(dev, (coupled[i].bottomRows(n) - P2[i]).cwiseAbs().maxCoeff());
  }
  return LeaderRiccati{calP, P1, std::move(P2), dev};
}

/// Assemble the 4n x 4n first-order system of the boundary value problem and
/// its transition matrices.
inline BVPSystem assemble_bvp(const TildeCoefficients& tilde, const BarCoefficients& bar,
                              double rcond_floor = kDefaultRcondFloor) {
  const TimeGrid grid = tilde.grid;
  const int n = tilde.A.rows();
  BVPSystem sys{MatrixPath(grid, 2 * n, 2 * n), MatrixPath(grid, 2 * n, 2 * n),
                MatrixPath(grid, 2 * n, 2 * n), MatrixPath(grid, 2 * n, 2 * n),
                MatrixPath(grid, 4 * n, 4 * n), MatrixPath(grid, 4 * n, 4 * n)};
  for (int i = 0; i < grid.node_count(); ++i) {
    const Matrix& At = tilde.A[i];
    const Matrix& Bt2 = tilde.B2[i];
    const Matrix& Gam = tilde.Gamma[i];
    const Matrix& S2b = bar.S2[i];
    const Matrix R2t = enforce_symmetry(bar.R2t[i]);
    const std::string label = "R2 tilde at t = " + std::to_string(grid.node(i));
    const Matrix Rinv_S2b = solve_linear(R2t, S2b, rcond_floor, label);              // k2 x n
    const Matrix Rinv_GamT = solve_linear(R2t, Matrix(Gam.transpose()), rcond_floor, label);
    const Matrix Rinv_Bt2T = solve_linear(R2t, Matrix(Bt2.transpose()), rcond_floor, label);

    Matrix blockA(2 * n, 2 * n), blockB(2 * n, 2 * n), blockAhat(2 * n, 2 * n),
        blockBhat(2 * n, 2 * n);
    blockA.topLeftCorner(n, n) = At - Bt2 * Rinv_S2b;
    blockA.topRightCorner(n, n) = -Bt2 * Rinv_GamT;
    blockA.bottomLeftCorner(n, n) = bar.B1[i].transpose();
    blockA.bottomRightCorner(n, n) = At.transpose() - bar.Gamma[i].transpose();

    blockB.topLeftCorner(n, n) = bar.B2[i];
    blockB.topRightCorner(n, n) = -Bt2 * Rinv_Bt2T;
    blockB.bottomLeftCorner(n, n) = bar.D1[i];
    blockB.bottomRightCorner(n, n) = bar.B2[i].transpose();

    blockAhat.topLeftCorner(n, n) = Gam * Rinv_S2b;
    blockAhat.topRightCorner(n, n) = Gam * Rinv_GamT;
    blockAhat.bottomLeftCorner(n, n) = Matrix::Zero(n, n);
    blockAhat.bottomRightCorner(n, n) = S2b.transpose() * Rinv_GamT;

    blockBhat.topLeftCorner(n, n) = bar.Gamma[i] - At.transpose();
    blockBhat.topRightCorner(n, n) = Gam * Rinv_Bt2T;
    blockBhat.bottomLeftCorner(n, n) = -bar.B1[i];
    blockBhat.bottomRightCorner(n, n) = -At.transpose() + S2b.transpose() * Rinv_Bt2T;

    Matrix curly(4 * n, 4 * n);
    curly.topLeftCorner(2 * n, 2 * n) = blockA;
    curly.topRightCorner(2 * n, 2 * n) = blockB;
    curly.bottomLeftCorner(2 * n, 2 * n) = blockAhat;
    curly.bottomRightCorner(2 * n, 2 * n) = blockBhat;

    sys.blockA.set(i, blockA);
    sys.blockB.set(i, blockB);
    sys.blockAhat.set(i, blockAhat);
    sys.blockBhat.set(i, blockBhat);
    sys.curlyA.set(i, curly);
  }
  sys.Phi = transition_matrix(sys.curlyA, grid);
  return sys;
}

/// min over nodes of det of the lower-right 2n x 2n block of Phi(t).
/// Diagnostic only; solve_bvp enforces the floor.
inline double check_det_condition(const BVPSystem& sys) {
  const int m = sys.Phi.rows() / 2;
  double min_det = std::numeric_limits<double>::infinity();
  for (int i = 0; i < sys.Phi.node_count(); ++i)
    min_det = std::min(min_det, sys.Phi[i].bottomRightCorner(m, m).determinant());
  return min_det;
}

/// Single-shooting solve of the boundary value problem through the
/// fundamental matrix: Phi22(T) Y0 = -Phi21(T) X0, then (X, Y) = Phi (X0; Y0).
inline BVPSolution solve_bvp(const BVPSystem& sys, const Vector& x0, double det_floor = 1e-8,
                             double rcond_floor = kDefaultRcondFloor) {
  const TimeGrid grid = sys.Phi.grid();
  const int m = sys.Phi.rows() / 2;  // 2n
  const int n = m / 2;
  if (static_cast<int>(x0.size()) != n) throw ShapeMismatchError("solve_bvp: x0 has wrong size");

  const double min_det = check_det_condition(sys);
  if (!(min_det > det_floor))
    throw SolverInfeasibleError("solve_bvp: determinant condition " + std::to_string(min_det) +
                                " not above floor " + std::to_string(det_floor));

  const Matrix& PhiT = sys.Phi[grid.steps()];
  Vector X0 = Vector::Zero(m);
  X0.head(n) = x0;
  const Matrix Phi21 = PhiT.bottomLeftCorner(m, m);
  const Matrix Phi22 = PhiT.bottomRightCorner(m, m);
  const Vector Y0 = solve_linear(Phi22, Vector(-Phi21 * X0), rcond_floor, "Phi22(T)").col(0);

  BVPSolution sol{MatrixPath(grid, n, 1), MatrixPath(grid, n, 1), MatrixPath(grid, n, 1),
                  MatrixPath(grid, n, 1), 0.0};
  Vector z0(2 * m);
  z0.head(m) = X0;
  z0.tail(m) = Y0;
  for (int i = 0; i < grid.node_count(); ++i) {
    const Vector z = sys.Phi[i] * z0;
    sol.Ex.set(i, z.segment(0, n));
    sol.Ep.set(i, z.segment(n, n));
    sol.phiStar.set(i, z.segment(2 * n, n));
    sol.phi.set(i, z.segment(3 * n, n));
  }
  const Vector zT = sys.Phi[grid.steps()] * z0;
  sol.terminal_residual = zT.tail(m).norm();
  return sol;
}

/// Leader control path and gains from the Riccati and BVP solutions.
inline LeaderSolution leader_control(const BVPSolution& bvp, const TildeCoefficients& tilde,
                                     const BarCoefficients& bar,
                                     double rcond_floor = kDefaultRcondFloor) {
  const TimeGrid grid = tilde.grid;
  const int n = tilde.A.rows();
  const int k2 = tilde.B2.cols();
  LeaderGains gains{MatrixPath(grid, k2, n), MatrixPath(grid, k2, n), MatrixPath(grid, k2, n),
                    MatrixPath(grid, k2, n)};
  MatrixPath w(grid, k2, 1);
  for (int i = 0; i < grid.node_count(); ++i) {
    const Matrix R2t = enforce_symmetry(bar.R2t[i]);
    const std::string label = "R2 tilde at t = " + std::to_string(grid.node(i));
    gains.L_Ex.set(i, -solve_linear(R2t, bar.S2[i], rcond_floor, label));
    gains.L_phiStar.set(i, -solve_linear(R2t, bar.D2PD1[i], rcond_floor, label));
    gains.L_Ep.set(i, -solve_linear(R2t, Matrix(tilde.Gamma[i].transpose()), rcond_floor, label));
    gains.L_phi.set(i, -solve_linear(R2t, Matrix(tilde.B2[i].transpose()), rcond_floor, label));
    w.set(i, gains.L_Ex[i] * bvp.Ex[i] + gains.L_phiStar[i] * bvp.phiStar[i] +
                 gains.L_Ep[i] * bvp.Ep[i] + gains.L_phi[i] * bvp.phi[i]);
  }
  return LeaderSolution{bvp, std::move(w), std::move(gains)};
}

/// Mean trajectories of the adjoint pair (y, z) implied by the feedback
/// representation; used by the stationarity residual and the simulation
/// cross-checks.
struct MeanAdjointPaths {
  MatrixPath Ey;               // n x 1
  std::vector<MatrixPath> Ez;  // d of n x 1
};

inline MeanAdjointPaths analytic_mean_adjoints(const LeaderRiccati& riccati,
                                               const BVPSolution& bvp, const MatrixPath& w_star,
                                               const TildeCoefficients& tilde) {
  const TimeGrid grid = tilde.grid;
  const int n = tilde.A.rows();
  const int d = static_cast<int>(tilde.C.size());
  MeanAdjointPaths mean{MatrixPath(grid, n, 1),
                        std::vector<MatrixPath>(static_cast<std::size_t>(d), MatrixPath(grid, n, 1))};
  for (int i = 0; i < grid.node_count(); ++i) {
    mean.Ey.set(i, riccati.P1[i] * bvp.Ex[i] + bvp.phi[i]);
    const Matrix PS = riccati.P1[i] + riccati.P2[i];
    for (int j = 0; j < d; ++j)
      mean.Ez[static_cast<std::size_t>(j)].set(
          i, PS * (tilde.C[static_cast<std::size_t>(j)][i] * bvp.Ex[i] +
                   tilde.D1[static_cast<std::size_t>(j)][i] * bvp.phiStar[i] +
                   tilde.D2[static_cast<std::size_t>(j)][i] * w_star[i]));
  }
  return mean;
}

/// Sup over nodes of |R2 w + (B2~)' Ey + sum_j (D2~^j)' Ez^j + S2 Ex + Gamma' Ep|.
inline double leader_stationarity_residual(const MatrixPath& w, const MeanAdjointPaths& mean,
                                           const MatrixPath& Ex, const MatrixPath& Ep,
                                           const ProblemData& data,
                                           const TildeCoefficients& tilde) {
  const TimeGrid grid = w.grid();
  double sup = 0.0;
  for (int i = 0; i < grid.node_count(); ++i) {
    Matrix r = data.R2[i] * w[i] + tilde.B2[i].transpose() * mean.Ey[i] + data.S2[i] * Ex[i] +
               tilde.Gamma[i].transpose() * Ep[i];
    for (int j = 0; j < data.dims.d; ++j)
      r += tilde.D2[static_cast<std::size_t>(j)][i].transpose() *
           mean.Ez[static_cast<std::size_t>(j)][i];
    sup = std::max(sup, r.cwiseAbs().maxCoeff());
  }
  return sup;
}

}  // namespace stlq
