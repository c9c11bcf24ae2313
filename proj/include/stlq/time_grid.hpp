#pragma once

#include <stdexcept>

namespace stlq {

/// Uniform time grid on [0, horizon] with nodes t_i = i * horizon / steps.
class TimeGrid {
 public:
  TimeGrid(double horizon, int steps) : horizon_(horizon), steps_(steps) {
    if (!(horizon > 0.0)) throw std::invalid_argument("TimeGrid: horizon must be positive");
    if (steps < 1) throw std::invalid_argument("TimeGrid: need at least one step");
  }

  double horizon() const { return horizon_; }
  int steps() const { return steps_; }
  int node_count() const { return steps_ + 1; }
  double dt() const { return horizon_ / steps_; }
  double node(int i) const { return i == steps_ ? horizon_ : i * dt(); }

  /// Same horizon and step count.
  bool operator==(const TimeGrid& other) const = default;

 private:
  double horizon_;
  int steps_;
};

}  // namespace stlq
