#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "stlq/linalg.hpp"
#include "stlq/matrix_path.hpp"

namespace stlq {

struct Dims {
  int n = 1;   // state
  int k1 = 1;  // follower control
  int k2 = 1;  // leader control
  int d = 1;   // Brownian channels

  void validate() const {
    if (n < 1 || k1 < 1 || k2 < 1 || d < 1)
      throw ShapeMismatchError("Dims: all dimensions must be >= 1");
  }
};

/// Central numeric thresholds. One place, documented defaults.
struct Tolerances {
  double pd_floor = 1e-8;      // uniform positive definiteness of R1, R2
  double g_slack = 1e-12;      // allowed negative margin for G1, G2
  double schur_slack = 1e-10;  // allowed negative margin for Schur complements
  double rcond_floor = 1e-10;  // guarded inverses
  double det_floor = 1e-8;     // BVP determinant condition
  double stationarity_se_gate = 2.0;  // |derivative| <= gate * SE
  double value_se_gate = 3.0;         // |J1_formula - J1_mc| <= gate * SE
};

/// Full coefficient set of the two-player game on a shared grid.
struct ProblemData {
  Dims dims;
  TimeGrid grid;
  Vector x0;

  MatrixPath A;                // n x n
  MatrixPath B1;               // n x k1
  MatrixPath B2;               // n x k2
  std::vector<MatrixPath> C;   // d of n x n
  std::vector<MatrixPath> D1;  // d of n x k1
  std::vector<MatrixPath> D2;  // d of n x k2

  MatrixPath Q1;  // n x n symmetric
  MatrixPath S1;  // k1 x n
  MatrixPath R1;  // k1 x k1 symmetric
  Matrix G1;      // n x n symmetric

  MatrixPath Q2;  // n x n symmetric
  MatrixPath S2;  // k2 x n
  MatrixPath R2;  // k2 x k2 symmetric
  Matrix G2;      // n x n symmetric

  static ProblemData constant(const Dims& dims, const TimeGrid& grid, const Vector& x0,
                              const Matrix& A, const Matrix& B1, const Matrix& B2,
                              const std::vector<Matrix>& C, const std::vector<Matrix>& D1,
                              const std::vector<Matrix>& D2, const Matrix& Q1, const Matrix& S1,
                              const Matrix& R1, const Matrix& G1, const Matrix& Q2,
                              const Matrix& S2, const Matrix& R2, const Matrix& G2) {
    auto paths = [&grid](const std::vector<Matrix>& ms) {
      std::vector<MatrixPath> out;
      out.reserve(ms.size());
      for (const auto& m : ms) out.push_back(MatrixPath::constant(grid, m));
      return out;
    };
    ProblemData data{dims,
                     grid,
                     x0,
                     MatrixPath::constant(grid, A),
                     MatrixPath::constant(grid, B1),
                     MatrixPath::constant(grid, B2),
                     paths(C),
                     paths(D1),
                     paths(D2),
                     MatrixPath::constant(grid, Q1),
                     MatrixPath::constant(grid, S1),
                     MatrixPath::constant(grid, R1),
                     G1,
                     MatrixPath::constant(grid, Q2),
                     MatrixPath::constant(grid, S2),
                     MatrixPath::constant(grid, R2),
                     G2};
    data.validate();
    return data;
  }

  void validate() const {
    dims.validate();
    auto shape = [](const MatrixPath& p, int r, int c, const char* name) {
      if (p.rows() != r || p.cols() != c)
        throw ShapeMismatchError(std::string("ProblemData: ") + name + " has wrong shape");
      if (!p.all_finite())
        throw NonFiniteError(std::string("ProblemData: ") + name + " has non-finite entries");
    };
    auto list_shape = [&shape, this](const std::vector<MatrixPath>& ps, int r, int c,
                                     const char* name) {
      if (static_cast<int>(ps.size()) != dims.d)
        throw ShapeMismatchError(std::string("ProblemData: ") + name + " must have d entries");
      for (const auto& p : ps) shape(p, r, c, name);
    };
    auto symmetric = [](const MatrixPath& p, const char* name) {
      for (int i = 0; i < p.node_count(); ++i) {
        const double scale = p[i].cwiseAbs().maxCoeff();
        if ((p[i] - p[i].transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(scale, 1.0))
          throw NotSymmetricError(std::string("ProblemData: ") + name + " is not symmetric");
      }
    };
    const int n = dims.n, k1 = dims.k1, k2 = dims.k2;
    if (static_cast<int>(x0.size()) != n)
      throw ShapeMismatchError("ProblemData: x0 has wrong dimension");
    shape(A, n, n, "A");
    shape(B1, n, k1, "B1");
    shape(B2, n, k2, "B2");
    list_shape(C, n, n, "C");
    list_shape(D1, n, k1, "D1");
    list_shape(D2, n, k2, "D2");
    shape(Q1, n, n, "Q1");
    shape(S1, k1, n, "S1");
    shape(R1, k1, k1, "R1");
    shape(Q2, n, n, "Q2");
    shape(S2, k2, n, "S2");
    shape(R2, k2, k2, "R2");
    symmetric(Q1, "Q1");
    symmetric(R1, "R1");
    symmetric(Q2, "Q2");
    symmetric(R2, "R2");
    if (G1.rows() != n || G1.cols() != n || G2.rows() != n || G2.cols() != n)
      throw ShapeMismatchError("ProblemData: terminal weight has wrong shape");
    if ((G1 - G1.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(G1.cwiseAbs().maxCoeff(), 1.0))
      throw NotSymmetricError("ProblemData: G1 is not symmetric");
    if ((G2 - G2.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(G2.cwiseAbs().maxCoeff(), 1.0))
      throw NotSymmetricError("ProblemData: G2 is not symmetric");
  }
};

/// Numerical margins for the standing assumptions. Data-only checks are
/// filled by validate_assumptions; margins that depend on Riccati solutions
/// are filled later by the solver pipeline.
struct AssumptionReport {
  double a22_R1_min_eig = std::numeric_limits<double>::quiet_NaN();
  double a22_G1_min_eig = std::numeric_limits<double>::quiet_NaN();
  double a22_schur_min_eig = std::numeric_limits<double>::quiet_NaN();
  double a23_R2_min_eig = std::numeric_limits<double>::quiet_NaN();
  double a23_G2_min_eig = std::numeric_limits<double>::quiet_NaN();
  double a23_schur_min_eig = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> a21_min_rcond;      // min over nodes, rcond of R1 + (D1)'P D1
  std::optional<double> a24_min_rcond;      // min over nodes, rcond of R2 + (D2~)'(P1+P2)D2~
  std::optional<double> a25_schur_min_eig;  // min eig of Q2~ - (S2~)'(R2~)^{-1} S2~
  std::optional<double> det_condition_min;  // min over nodes of det of lower-right block

  bool a22_pass(const Tolerances& tol) const {
    return a22_R1_min_eig >= tol.pd_floor && a22_G1_min_eig >= -tol.g_slack &&
           a22_schur_min_eig >= -tol.schur_slack;
  }
  bool a23_pass(const Tolerances& tol) const {
    return a23_R2_min_eig >= tol.pd_floor && a23_G2_min_eig >= -tol.g_slack &&
           a23_schur_min_eig >= -tol.schur_slack;
  }
  bool a21_pass(const Tolerances& tol) const {
    return a21_min_rcond && *a21_min_rcond >= tol.rcond_floor;
  }
  bool a24_pass(const Tolerances& tol) const {
    return a24_min_rcond && *a24_min_rcond >= tol.rcond_floor;
  }
  bool a25_pass(const Tolerances& tol) const {
    return a25_schur_min_eig && *a25_schur_min_eig >= -tol.schur_slack;
  }
  bool det_pass(const Tolerances& tol) const {
    return det_condition_min && *det_condition_min > tol.det_floor;
  }
  bool all_pass(const Tolerances& tol) const {
    return a22_pass(tol) && a23_pass(tol) && a21_pass(tol) && a24_pass(tol) && a25_pass(tol) &&
           det_pass(tol);
  }

  /// Name of the first failed assumption, empty when everything holds.
  std::string first_failure(const Tolerances& tol) const {
    if (a22_R1_min_eig < tol.pd_floor) return "A2.2: R1 not uniformly positive";
    if (a22_G1_min_eig < -tol.g_slack) return "A2.2: G1 not positive semidefinite";
    if (a22_schur_min_eig < -tol.schur_slack) return "A2.2: Q1 - S1'(R1)^{-1}S1 not PSD";
    if (a23_R2_min_eig < tol.pd_floor) return "A2.3: R2 not uniformly positive";
    if (a23_G2_min_eig < -tol.g_slack) return "A2.3: G2 not positive semidefinite";
    if (a23_schur_min_eig < -tol.schur_slack) return "A2.3: Q2 - S2'(R2)^{-1}S2 not PSD";
    if (!a21_pass(tol)) return "A2.1: R1 + (D1)'P D1 not invertible on the grid";
    if (!a24_pass(tol)) return "A2.4: R2 + (D2~)'(P1+P2)D2~ not invertible on the grid";
    if (!a25_pass(tol)) return "A2.5: leader Schur complement not PSD";
    if (!det_pass(tol)) return "determinant condition below floor";
    return "";
  }
};

namespace detail {

/// min over nodes of the smallest eigenvalue of Q - S'R^{-1}S; -inf when R is
/// too degenerate to form the complement.
inline double schur_margin(const MatrixPath& Q, const MatrixPath& S, const MatrixPath& R,
                           double r_margin, const Tolerances& tol) {
  if (r_margin < tol.pd_floor) return -std::numeric_limits<double>::infinity();
  double margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < Q.node_count(); ++i) {
    const Matrix rinv_s = solve_linear(R[i], S[i], tol.rcond_floor, "Schur weight");
    margin = std::min(margin, min_eigenvalue(enforce_symmetry(Q[i] - S[i].transpose() * rinv_s)));
  }
  return margin;
}

}  // namespace detail

/// Data-only assumption margins (uniform convexity of both cost functionals).
inline AssumptionReport validate_assumptions(const ProblemData& data,
                                             const Tolerances& tol = {}) {
  data.validate();
  AssumptionReport report;
  auto path_min_eig = [](const MatrixPath& p) {
    double m = std::numeric_limits<double>::infinity();
    for (int i = 0; i < p.node_count(); ++i) m = std::min(m, min_eigenvalue(p[i]));
    return m;
  };
  report.a22_R1_min_eig = path_min_eig(data.R1);
  report.a22_G1_min_eig = min_eigenvalue(data.G1);
  report.a22_schur_min_eig =
      detail::schur_margin(data.Q1, data.S1, data.R1, report.a22_R1_min_eig, tol);
  report.a23_R2_min_eig = path_min_eig(data.R2);
  report.a23_G2_min_eig = min_eigenvalue(data.G2);
  report.a23_schur_min_eig =
      detail::schur_margin(data.Q2, data.S2, data.R2, report.a23_R2_min_eig, tol);
  return report;
}

}  // namespace stlq
