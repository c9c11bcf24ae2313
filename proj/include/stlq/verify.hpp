#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stlq/simulation.hpp"

namespace stlq {

struct GateResult {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double bound = 0.0;
};

struct VerifyConfig {
  SimConfig sim;
  int leader_direction_count = 5;
  std::uint64_t direction_seed = 1234;
  std::vector<double> leader_epsilons = {0.1, 0.5};
  std::vector<double> follower_epsilons = {0.5, 1.0};
  bool perturb_self_test = false;  // corrupt w* by +0.5 and expect the gate to fail
};

struct VerifyOutcome {
  CostReport cost;
  MfFbsdeResiduals mf;
  PerturbationReport leader_perturbation;
  PerturbationReport follower_perturbation;
  // mean-field consistency margins: worst |sample mean - BVP path| minus
  // 3 SE over every 10th node (negative = inside the band)
  double mean_field_x_margin = 0.0;
  double mean_field_p_margin = 0.0;
  std::vector<GateResult> gates;
  bool pass = false;
  std::string first_failed_gate;
};

/// Smooth deterministic leader directions: constant plus one sine mode with
/// seeded coefficients, unit sup-norm scale.
inline std::vector<MatrixPath> random_leader_directions(const ProblemData& data, int count,
                                                        std::uint64_t seed) {
  std::vector<MatrixPath> dirs;
  dirs.reserve(static_cast<std::size_t>(count));
  const TimeGrid& grid = data.grid;
  const int k2 = data.dims.k2;
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (int k = 0; k < count; ++k) {
    Vector a0(k2), a1(k2), phase(k2);
    for (int c = 0; c < k2; ++c) {
      a0(c) = unif(gen);
      a1(c) = unif(gen);
      phase(c) = unif(gen) * 3.141592653589793;
    }
    MatrixPath dir(grid, k2, 1);
    for (int i = 0; i < grid.node_count(); ++i) {
      const double t = grid.node(i) / grid.horizon();
      Vector v(k2);
      for (int c = 0; c < k2; ++c)
        v(c) = a0(c) + a1(c) * std::sin(3.141592653589793 * t + phase(c));
      dir.set(i, v);
    }
    dirs.push_back(std::move(dir));
  }
  return dirs;
}

namespace detail {

/// perturb_leader around an arbitrary center control (used by the negative
/// control; the follower best-responds to every tested control).
inline PerturbationReport perturb_leader_around(const ProblemData& data,
                                                const EquilibriumSolution& eq,
                                                const MatrixPath& w_center,
                                                const std::vector<MatrixPath>& directions,
                                                const std::vector<double>& epsilons,
                                                const SimConfig& cfg) {
  const SimTables tb = build_tables(data, eq);
  const MatrixPath phi_center = solve_phi(eq.tilde, w_center);
  const std::vector<double> base = leader_scenario_costs(tb, w_center, phi_center, cfg);
  const TimeGrid& grid = data.grid;

  PerturbationReport report;
  int dir_index = 0;
  for (const auto& delta : directions) {
    DirectionReport dr;
    dr.name = "direction_" + std::to_string(dir_index++);
    double min_eps = std::numeric_limits<double>::infinity();
    std::vector<double> plus_min, minus_min;
    for (double eps : epsilons) {
      for (double sign : {+1.0, -1.0}) {
        const double e = sign * eps;
        MatrixPath w(grid, static_cast<int>(w_center.rows()), 1);
        for (int i = 0; i < grid.node_count(); ++i) w.set(i, w_center[i] + e * delta[i]);
        const MatrixPath phi_w = solve_phi(eq.tilde, w);
        const std::vector<double> cost = leader_scenario_costs(tb, w, phi_w, cfg);
        std::vector<double> deltas(cost.size());
        for (std::size_t k = 0; k < cost.size(); ++k) deltas[k] = cost[k] - base[k];
        auto [m, se] = mean_se(deltas);
        dr.entries.push_back(PerturbationEntry{e, m, se});
        if (eps < min_eps) min_eps = eps;
        if (eps <= min_eps) (sign > 0 ? plus_min : minus_min) = std::move(deltas);
      }
    }
    if (!plus_min.empty() && !minus_min.empty() && min_eps > 0.0) {
      std::vector<double> deriv(plus_min.size());
      for (std::size_t k = 0; k < deriv.size(); ++k)
        deriv[k] = (plus_min[k] - minus_min[k]) / (2.0 * min_eps);
      auto [m, se] = mean_se(deriv);
      dr.derivative_mean = m;
      dr.derivative_se = se;
      dr.derivative_epsilon = min_eps;
    }
    report.directions.push_back(std::move(dr));
  }
  return report;
}

}  // namespace detail

/// Monte Carlo verification of the equilibrium: costs and value formula,
/// mean-field consistency, coupled-system residuals and both perturbation
/// tests, folded into pass/fail gates.
inline VerifyOutcome run_verify(const ProblemData& data, const EquilibriumSolution& eq,
                                const VerifyConfig& vcfg) {
  VerifyOutcome out;
  const Tolerances& tol = eq.tol;

  TrajectoryBundle bundle = simulate_closed_loop(data, eq, vcfg.sim);
  out.cost = estimate_costs(bundle, data, eq);
  out.mf = mf_fbsde_residual(bundle, data, eq);

  // mean-field margins at every 10th node
  {
    const TimeGrid& grid = data.grid;
    double mx = -std::numeric_limits<double>::infinity();
    double mp = mx;
    // every 10th node outside the start-up band, where both paths are pinned
    // to the initial condition and the standard error degenerates
    for (int i = 0; i < grid.node_count(); i += 10) {
      if (grid.node(i) < 0.05 * grid.horizon()) continue;
      for (int c = 0; c < data.dims.n; ++c) {
        mx = std::max(mx, std::abs(bundle.x_mean(c, i) - eq.leader.bvp.Ex[i](c, 0)) -
                              3.0 * bundle.x_se(c, i));
        mp = std::max(mp, std::abs(bundle.p_mean(c, i) - eq.leader.bvp.Ep[i](c, 0)) -
                              3.0 * bundle.p_se(c, i));
      }
    }
    out.mean_field_x_margin = mx;
    out.mean_field_p_margin = mp;
  }

  // leader perturbation, possibly around a corrupted control (self test)
  std::vector<MatrixPath> directions =
      random_leader_directions(data, vcfg.leader_direction_count, vcfg.direction_seed);
  MatrixPath center = eq.leader.w_star;
  if (vcfg.perturb_self_test) {
    for (int i = 0; i < center.node_count(); ++i)
      center[i] = center[i] + Matrix::Constant(center.rows(), 1, 0.5);
    directions.insert(directions.begin(),
                      MatrixPath::constant(data.grid, Matrix::Ones(data.dims.k2, 1)));
  }
  out.leader_perturbation =
      detail::perturb_leader_around(data, eq, center, directions, vcfg.leader_epsilons, vcfg.sim);

  // follower perturbations: one deterministic direction, one g(t) W_t family
  std::vector<FollowerPerturbation> fps;
  {
    std::mt19937_64 gen(vcfg.direction_seed ^ 0x9E3779B97F4A7C15ull);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    MatrixPath det(data.grid, data.dims.k1, 1);
    Vector a0(data.dims.k1), a1(data.dims.k1);
    for (int c = 0; c < data.dims.k1; ++c) {
      a0(c) = unif(gen);
      a1(c) = unif(gen);
    }
    for (int i = 0; i < data.grid.node_count(); ++i) {
      const double t = data.grid.node(i) / data.grid.horizon();
      Vector v(data.dims.k1);
      for (int c = 0; c < data.dims.k1; ++c)
        v(c) = a0(c) + a1(c) * std::sin(3.141592653589793 * t);
      det.set(i, v);
    }
    fps.push_back({FollowerPerturbation::Kind::Deterministic, std::move(det), "deterministic"});
    Matrix g = Matrix::Zero(data.dims.k1, data.dims.d);
    for (int c = 0; c < data.dims.k1; ++c)
      for (int j = 0; j < data.dims.d; ++j) g(c, j) = 0.5 * unif(gen);
    fps.push_back({FollowerPerturbation::Kind::GainTimesBrownian,
                   MatrixPath::constant(data.grid, g), "gain_times_brownian"});
  }
  out.follower_perturbation =
      perturb_follower(data, eq, fps, vcfg.follower_epsilons, vcfg.sim);

  // gates
  auto add_gate = [&out](const std::string& name, bool pass, double value, double bound) {
    out.gates.push_back(GateResult{name, pass, value, bound});
    if (!pass && out.first_failed_gate.empty()) out.first_failed_gate = name;
  };

  add_gate("follower_pathwise_stationarity", out.cost.follower_stationarity_sup <= 1e-9,
           out.cost.follower_stationarity_sup, 1e-9);

  {
    const double diff = std::abs(out.cost.j1_formula - out.cost.j1_mean);
    const double bound = tol.value_se_gate * out.cost.j1_se + 1e-12;
    add_gate("value_formula_agreement", diff <= bound, diff, bound);
  }

  for (const auto& dr : out.leader_perturbation.directions) {
    const double bound = tol.stationarity_se_gate * dr.derivative_se + 1e-12;
    add_gate("leader_stationarity_" + dr.name, std::abs(dr.derivative_mean) <= bound,
             std::abs(dr.derivative_mean), bound);
    for (const auto& e : dr.entries) {
      const double cbound = -(tol.stationarity_se_gate * e.delta_se + 1e-12);
      add_gate("leader_convexity_" + dr.name + "_eps_" + std::to_string(e.epsilon),
               e.delta_mean >= cbound, e.delta_mean, cbound);
    }
  }

  for (const auto& dr : out.follower_perturbation.directions) {
    for (const auto& e : dr.entries) {
      const double cbound = -(tol.stationarity_se_gate * e.delta_se + 1e-12);
      add_gate("follower_convexity_" + dr.name + "_eps_" + std::to_string(e.epsilon),
               e.delta_mean >= cbound, e.delta_mean, cbound);
    }
    // quadratic scaling: Delta J(2 eps) / Delta J(eps) in [3.5, 4.5]
    double d_small = 0.0, d_large = 0.0;
    bool have = false;
    if (vcfg.follower_epsilons.size() >= 2) {
      const double e1 = vcfg.follower_epsilons[0];
      const double e2 = vcfg.follower_epsilons[1];
      if (std::abs(e2 - 2.0 * e1) < 1e-12) {
        for (const auto& e : dr.entries) {
          if (std::abs(e.epsilon - e1) < 1e-12) d_small = e.delta_mean;
          if (std::abs(e.epsilon - e2) < 1e-12) d_large = e.delta_mean;
        }
        have = true;
      }
    }
    if (have && d_small > 0.0) {
      const double ratio = d_large / d_small;
      add_gate("follower_quadratic_" + dr.name, ratio >= 3.5 && ratio <= 4.5, ratio, 4.0);
    }
  }

  out.pass = true;
  for (const auto& g : out.gates) out.pass = out.pass && g.pass;
  return out;
}

}  // namespace stlq
