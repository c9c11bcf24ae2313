#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "stlq/errors.hpp"
#include "stlq/time_grid.hpp"

namespace stlq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Matrix-valued function of time sampled at the nodes of a uniform grid.
/// Between nodes the path is evaluated by linear interpolation, which is
/// exact for constant data.
class MatrixPath {
 public:
  MatrixPath(TimeGrid grid, int rows, int cols)
      : grid_(grid), rows_(rows), cols_(cols),
        values_(static_cast<std::size_t>(grid.node_count()), Matrix::Zero(rows, cols)) {
    if (rows < 1 || cols < 1) throw ShapeMismatchError("MatrixPath: dimensions must be positive");
  }

  static MatrixPath constant(TimeGrid grid, const Matrix& value) {
    MatrixPath p(grid, static_cast<int>(value.rows()), static_cast<int>(value.cols()));
    for (auto& v : p.values_) v = value;
    return p;
  }

  static MatrixPath sampled(TimeGrid grid, const std::function<Matrix(double)>& f) {
    Matrix first = f(0.0);
    MatrixPath p(grid, static_cast<int>(first.rows()), static_cast<int>(first.cols()));
    p.values_[0] = first;
    for (int i = 1; i < grid.node_count(); ++i) p.set(i, f(grid.node(i)));
    return p;
  }

  const TimeGrid& grid() const { return grid_; }
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int node_count() const { return grid_.node_count(); }

  const Matrix& operator[](int i) const { return values_[static_cast<std::size_t>(i)]; }
  Matrix& operator[](int i) { return values_[static_cast<std::size_t>(i)]; }

  void set(int i, const Matrix& value) {
    if (value.rows() != rows_ || value.cols() != cols_)
      throw ShapeMismatchError("MatrixPath::set: node value has wrong shape");
    values_[static_cast<std::size_t>(i)] = value;
  }

  /// Linear interpolation; t is clamped to [0, horizon].
  Matrix eval(double t) const {
    if (t <= 0.0) return values_.front();
    if (t >= grid_.horizon()) return values_.back();
    const double s = t / grid_.dt();
    int i = static_cast<int>(std::floor(s));
    if (i >= grid_.steps()) i = grid_.steps() - 1;
    const double theta = s - i;
    if (theta <= 1e-12) return values_[static_cast<std::size_t>(i)];
    if (theta >= 1.0 - 1e-12) return values_[static_cast<std::size_t>(i + 1)];
    return (1.0 - theta) * values_[static_cast<std::size_t>(i)] +
           theta * values_[static_cast<std::size_t>(i + 1)];
  }

  bool all_finite() const {
    for (const auto& v : values_)
      if (!v.allFinite()) return false;
    return true;
  }

  /// max over nodes of the max-abs-entry distance to another path.
  double max_deviation(const MatrixPath& other) const {
    if (other.rows_ != rows_ || other.cols_ != cols_ || !(other.grid_ == grid_))
      throw ShapeMismatchError("MatrixPath::max_deviation: incompatible paths");
    double dev = 0.0;
    for (int i = 0; i < node_count(); ++i)
      dev = std::max(dev, (values_[static_cast<std::size_t>(i)] - other[i]).cwiseAbs().maxCoeff());
    return dev;
  }

 private:
  TimeGrid grid_;
  int rows_, cols_;
  std::vector<Matrix> values_;
};

}  // namespace stlq
