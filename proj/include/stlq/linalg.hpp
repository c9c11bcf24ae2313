#pragma once

#include <Eigen/Dense>
#include <string>

#include "stlq/errors.hpp"
#include "stlq/matrix_path.hpp"

namespace stlq {

inline constexpr double kDefaultRcondFloor = 1e-10;

/// Reciprocal condition number sigma_min / sigma_max (0 for the zero matrix).
inline double rcond(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  if (!(smax > 0.0)) return 0.0;
  return sv(sv.size() - 1) / smax;
}

/// Guarded dense solve M X = rhs. Throws IllConditionedError when the
/// reciprocal condition estimate falls below rcond_floor; `label` names the
/// offending quantity in the message.
inline Matrix solve_linear(const Matrix& m, const Matrix& rhs,
                           double rcond_floor = kDefaultRcondFloor,
                           const std::string& label = "matrix") {
  if (m.rows() != m.cols()) throw ShapeMismatchError("solve_linear: matrix must be square");
  if (rhs.rows() != m.rows()) throw ShapeMismatchError("solve_linear: rhs row count mismatch");
  if (!m.allFinite() || !rhs.allFinite())
    throw NonFiniteError("solve_linear: non-finite input (" + label + ")");
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double rc = smax > 0.0 ? sv(sv.size() - 1) / smax : 0.0;
  if (rc < rcond_floor)
    throw IllConditionedError(label + ": rcond " + std::to_string(rc) + " below floor " +
                              std::to_string(rcond_floor));
  return svd.solve(rhs);
}

/// (M + M^T) / 2. Idempotent.
inline Matrix enforce_symmetry(const Matrix& m) {
  if (m.rows() != m.cols()) throw ShapeMismatchError("enforce_symmetry: matrix must be square");
  return 0.5 * (m + m.transpose());
}

/// Smallest eigenvalue of a symmetric matrix. Rejects matrices whose
/// asymmetry exceeds 1e-12 * ||M||.
inline double min_eigenvalue(const Matrix& m) {
  if (m.rows() != m.cols()) throw ShapeMismatchError("min_eigenvalue: matrix must be square");
  const double scale = m.cwiseAbs().maxCoeff();
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * scale && asym > 0.0)
    throw NotSymmetricError("min_eigenvalue: matrix is not symmetric (asymmetry " +
                            std::to_string(asym) + ")");
  Eigen::SelfAdjointEigenSolver<Matrix> es(enforce_symmetry(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

}  // namespace stlq
