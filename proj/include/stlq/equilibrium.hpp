#pragma once

#include <utility>

#include "stlq/follower.hpp"
#include "stlq/leader.hpp"

namespace stlq {

/// Everything the deterministic pipeline produces: follower Riccati solution
/// and gains, transformed coefficients, leader Riccati system, boundary value
/// problem and the leader's control path.
struct EquilibriumSolution {
  Tolerances tol;
  AssumptionReport assumptions;
  FollowerSolution follower;
  TildeCoefficients tilde;
  LeaderRiccati riccati;
  BarCoefficients bar;
  BVPSystem system;
  LeaderSolution leader;
  double det_condition_min = 0.0;

  /// Follower's affine term under the equilibrium leader control; equals the
  /// BVP's phi* by construction (kept for direct access).
  const MatrixPath& phi_star() const { return leader.bvp.phiStar; }
};

/// Full deterministic solve: assumptions, follower Riccati, tilde family,
/// Lyapunov + decoupled Riccati with coupled cross-check, bar family, BVP,
/// leader control. Throws on violated hypotheses (IllConditioned,
/// SolverInfeasible, NonFinite).
inline EquilibriumSolution solve_equilibrium(const ProblemData& data, const Tolerances& tol = {}) {
  AssumptionReport assumptions = validate_assumptions(data, tol);

  FollowerSolution follower = solve_follower(data, tol.rcond_floor);
  TildeCoefficients tilde = build_tilde(follower.P, data, tol.rcond_floor);
  assumptions.a21_min_rcond = tilde.min_r1_rcond();

  MatrixPath calP = solve_calP(tilde, data);

  // Provisional bar carries the leader weights (they depend only on P1 + P2).
  const int n = data.dims.n;
  MatrixPath zeroP(data.grid, n, n);
  BarCoefficients weights = build_bar(zeroP, calP, tilde, data, tol.rcond_floor);

  MatrixPath P1 = solve_P1(calP, tilde, weights, data, tol.rcond_floor);
  LeaderRiccati riccati = compute_P2(calP, P1, tilde, data, tol.rcond_floor);

  BarCoefficients bar = build_bar(riccati.P1, riccati.P2, tilde, data, tol.rcond_floor);
  assumptions.a24_min_rcond = bar.min_r2_rcond();
  {
    double margin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < bar.grid.node_count(); ++i) {
      const Matrix rinv_s = solve_linear(enforce_symmetry(bar.R2t[i]), bar.S2t[i],
                                         tol.rcond_floor, "R2 tilde");
      margin = std::min(margin, min_eigenvalue(enforce_symmetry(
                                    bar.Q2t[i] - bar.S2t[i].transpose() * rinv_s)));
    }
    assumptions.a25_schur_min_eig = margin;
  }

  BVPSystem system = assemble_bvp(tilde, bar, tol.rcond_floor);
  const double det_min = check_det_condition(system);
  assumptions.det_condition_min = det_min;

  BVPSolution bvp = solve_bvp(system, data.x0, tol.det_floor, tol.rcond_floor);
  LeaderSolution leader = leader_control(bvp, tilde, bar, tol.rcond_floor);

  return EquilibriumSolution{tol,
                             std::move(assumptions),
                             std::move(follower),
                             std::move(tilde),
                             std::move(riccati),
                             std::move(bar),
                             std::move(system),
                             std::move(leader),
                             det_min};
}

}  // namespace stlq
