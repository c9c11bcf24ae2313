#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "stlq/verify.hpp"
#include "instances_common.hpp"

using namespace stlq;
using namespace stlq::testing;

namespace {

SimConfig small_cfg(int paths, std::uint64_t seed = 42) {
  SimConfig cfg;
  cfg.paths = paths;
  cfg.seed = seed;
  cfg.max_stored_paths = 4;
  return cfg;
}

double trapz_scalar(const TimeGrid& grid, const std::function<double(int)>& f) {
  double acc = 0.0;
  for (int i = 0; i < grid.steps(); ++i) acc += 0.5 * grid.dt() * (f(i) + f(i + 1));
  return acc;
}

}  // namespace

TEST_CASE("counter_normal: deterministic, independent of everything but the key") {
  const double a = counter_normal(42, 7, 13, 1);
  REQUIRE(a == counter_normal(42, 7, 13, 1));
  REQUIRE(a != counter_normal(43, 7, 13, 1));
  REQUIRE(a != counter_normal(42, 8, 13, 1));
  REQUIRE(a != counter_normal(42, 7, 14, 1));
  REQUIRE(a != counter_normal(42, 7, 13, 0));
  // moments over a modest sample
  double sum = 0.0, sumsq = 0.0;
  const int m = 200000;
  for (int i = 0; i < m; ++i) {
    const double z = counter_normal(1, static_cast<std::uint64_t>(i), 0, 0);
    sum += z;
    sumsq += z * z;
  }
  REQUIRE(std::abs(sum / m) < 0.01);
  REQUIRE(std::abs(sumsq / m - 1.0) < 0.02);
}

TEST_CASE("simulate_closed_loop: zero problem stays at zero with zero costs") {
  ProblemData data = zero_problem(50);
  EquilibriumSolution eq = solve_equilibrium(data);
  TrajectoryBundle bundle = simulate_closed_loop(data, eq, small_cfg(64));
  CostReport cost = estimate_costs(bundle, data, eq);
  REQUIRE(cost.j1_mean == 0.0);
  REQUIRE(cost.j2_mean == 0.0);
  REQUIRE(cost.j1_formula == 0.0);
  REQUIRE(bundle.x_mean.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(bundle.follower_stationarity_sup == 0.0);
  MfFbsdeResiduals mf = mf_fbsde_residual(bundle, data, eq);
  REQUIRE(mf.phi_star_ode == 0.0);
  REQUIRE(mf.y_bsde_sup == 0.0);
  REQUIRE(mf.y_terminal_gap == 0.0);
  REQUIRE(mf.stationarity_sample == 0.0);
}

TEST_CASE("simulate_closed_loop: zero diffusion collapses to one deterministic path") {
  TimeGrid grid(1.0, 400);
  ProblemData data = scalar_problem(grid, -0.2, 1.0, 0.8, /*C=*/0.0, /*D1=*/0.0, /*D2=*/0.0,
                                    1.0, 0.1, 1.0, 0.5, 0.8, 0.05, 1.0, 0.4, 1.0);
  EquilibriumSolution eq = solve_equilibrium(data);
  TrajectoryBundle bundle = simulate_closed_loop(data, eq, small_cfg(32));
  // sample variance of the terminal state is exactly zero
  REQUIRE(bundle.x_se.col(400).maxCoeff() == 0.0);
  CostReport cost = estimate_costs(bundle, data, eq);
  REQUIRE(cost.j1_se <= 1e-14);  // identical samples up to summation roundoff

  // deterministic quadrature oracle along the stored path
  const PathSample& path = bundle.stored[0];
  const double j1 = 0.5 * (trapz_scalar(grid, [&](int i) {
    const double x = path.x(0, i), u = path.u(0, i);
    return x * 1.0 * x + 2.0 * 0.1 * x * u + u * u;
  }) + 0.5 * path.x(0, 400) * path.x(0, 400));
  REQUIRE(cost.j1_mean == Catch::Approx(j1).margin(1e-8));
}

TEST_CASE("simulate_closed_loop: sample mean of x and p tracks the BVP within 3 SE") {
  ProblemData data = scalar_desk(1200);
  EquilibriumSolution eq = solve_equilibrium(data);
  TrajectoryBundle bundle = simulate_closed_loop(data, eq, small_cfg(2000));
  for (int i = 0; i <= 1200; i += 120) {
    const double gap_x = std::abs(bundle.x_mean(0, i) - eq.leader.bvp.Ex[i](0, 0));
    REQUIRE(gap_x <= 3.0 * bundle.x_se(0, i) + 1e-9);
    const double gap_p = std::abs(bundle.p_mean(0, i) - eq.leader.bvp.Ep[i](0, 0));
    REQUIRE(gap_p <= 3.0 * bundle.p_se(0, i) + 1e-9);
  }
}

TEST_CASE("simulate_closed_loop: pathwise follower stationarity is roundoff") {
  ProblemData data = scalar_desk(300);
  EquilibriumSolution eq = solve_equilibrium(data);
  TrajectoryBundle bundle = simulate_closed_loop(data, eq, small_cfg(500));
  REQUIRE(bundle.follower_stationarity_sup <= 1e-9);
}

TEST_CASE("estimate_costs: value formula agrees with Monte Carlo at 3 SE") {
  ProblemData data = scalar_desk(500);
  EquilibriumSolution eq = solve_equilibrium(data);
  TrajectoryBundle bundle = simulate_closed_loop(data, eq, small_cfg(20000));
  CostReport cost = estimate_costs(bundle, data, eq);
  REQUIRE(std::abs(cost.j1_formula - cost.j1_mean) <= 3.0 * cost.j1_se);
  REQUIRE(cost.leader_stationarity_sample <= 1e-6);
}

TEST_CASE("mf_fbsde_residual: backward residual shrinks roughly linearly in dt") {
  auto run = [](int steps) {
    ProblemData data = scalar_desk(steps);
    EquilibriumSolution eq = solve_equilibrium(data);
    TrajectoryBundle bundle = simulate_closed_loop(data, eq, small_cfg(2000, 7));
    MfFbsdeResiduals mf = mf_fbsde_residual(bundle, data, eq);
    return mf;
  };
  MfFbsdeResiduals coarse = run(500);
  MfFbsdeResiduals fine = run(1000);
  const double factor = coarse.y_bsde_sup / fine.y_bsde_sup;
  REQUIRE(factor >= 1.5);
  REQUIRE(factor <= 3.0);
  // phi* forward-difference residual also shrinks
  REQUIRE(coarse.phi_star_ode / fine.phi_star_ode >= 1.5);
  // terminal gap of the Euler-integrated backward equation decreases
  REQUIRE(fine.y_terminal_gap < coarse.y_terminal_gap);
  // transcription consistency stays at roundoff
  REQUIRE(coarse.p_drift_consistency <= 1e-10);
  REQUIRE(fine.p_drift_consistency <= 1e-10);
}

TEST_CASE("determinism: identical seed, different worker counts, identical output") {
  ProblemData data = scalar_desk(200);
  EquilibriumSolution eq = solve_equilibrium(data);
  SimConfig one = small_cfg(1024, 99);
  one.threads = 1;
  SimConfig four = small_cfg(1024, 99);
  four.threads = 4;
  TrajectoryBundle b1 = simulate_closed_loop(data, eq, one);
  TrajectoryBundle b4 = simulate_closed_loop(data, eq, four);
  REQUIRE(b1.j1_samples == b4.j1_samples);
  REQUIRE(b1.j2_samples == b4.j2_samples);
  REQUIRE((b1.x_mean - b4.x_mean).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((b1.p_se - b4.p_se).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((b1.stored[0].x - b4.stored[0].x).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(b1.y_bsde_residual == b4.y_bsde_residual);
}

TEST_CASE("antithetic pairing flips increments and needs an even path count") {
  ProblemData data = scalar_desk(100);
  EquilibriumSolution eq = solve_equilibrium(data);
  SimConfig odd = small_cfg(11);
  odd.antithetic = true;
  REQUIRE_THROWS_AS(simulate_closed_loop(data, eq, odd), std::invalid_argument);

  SimConfig cfg = small_cfg(512);
  cfg.antithetic = true;
  TrajectoryBundle bundle = simulate_closed_loop(data, eq, cfg);
  REQUIRE(bundle.sample_count == 256);
  REQUIRE((bundle.stored[0].dW + bundle.stored[1].dW).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("perturb_leader: zero coupling gives the exact quadratic growth") {
  ProblemData data = zero_coupling(250);
  EquilibriumSolution eq = solve_equilibrium(data);
  MatrixPath delta = MatrixPath::sampled(data.grid, [](double t) {
    return scalar(1.0 + 0.5 * std::sin(2.0 * t));
  });
  SimConfig cfg = small_cfg(128);
  PerturbationReport rep = perturb_leader(data, eq, {delta}, {0.0, 0.3, 1.0}, cfg);
  REQUIRE(rep.directions.size() == 1);
  for (const auto& e : rep.directions[0].entries) {
    const double oracle = 0.5 * e.epsilon * e.epsilon *
                          trapz_scalar(data.grid, [&](int i) {
                            const double dv = delta[i](0, 0);
                            return dv * 1.0 * dv;  // R2 = 1
                          });
    REQUIRE(e.delta_mean == Catch::Approx(oracle).margin(1e-12));
    REQUIRE(e.delta_se <= 1e-14);
  }
}

TEST_CASE("perturb_leader: desk instance passes stationarity and convexity") {
  ProblemData data = scalar_desk(1000);
  EquilibriumSolution eq = solve_equilibrium(data);
  std::vector<MatrixPath> dirs = random_leader_directions(data, 3, 2024);
  SimConfig cfg = small_cfg(2000);
  PerturbationReport rep = perturb_leader(data, eq, dirs, {0.1, 0.5}, cfg);
  for (const auto& dr : rep.directions) {
    REQUIRE(std::abs(dr.derivative_mean) <= 2.0 * dr.derivative_se + 1e-12);
    for (const auto& e : dr.entries) REQUIRE(e.delta_mean >= -2.0 * e.delta_se - 1e-12);
  }
}

TEST_CASE("perturb_follower: epsilon zero gives exactly zero") {
  ProblemData data = scalar_desk(100);
  EquilibriumSolution eq = solve_equilibrium(data);
  std::vector<FollowerPerturbation> fps;
  fps.push_back({FollowerPerturbation::Kind::Deterministic,
                 MatrixPath::constant(data.grid, scalar(1.0)), "const"});
  PerturbationReport rep = perturb_follower(data, eq, fps, {0.0}, small_cfg(64));
  for (const auto& e : rep.directions[0].entries) {
    REQUIRE(e.delta_mean == 0.0);
    REQUIRE(e.delta_se == 0.0);
  }
}

TEST_CASE("perturb_follower: trivial game has the exact quadratic growth") {
  ProblemData data = zero_problem(200);
  EquilibriumSolution eq = solve_equilibrium(data);
  std::vector<FollowerPerturbation> fps;
  MatrixPath det = MatrixPath::sampled(data.grid, [](double t) { return scalar(1.0 - t); });
  fps.push_back({FollowerPerturbation::Kind::Deterministic, det, "det"});
  Matrix g = Matrix::Constant(1, 1, 0.8);
  fps.push_back({FollowerPerturbation::Kind::GainTimesBrownian,
                 MatrixPath::constant(data.grid, g), "gW"});
  SimConfig cfg = small_cfg(512, 3);
  PerturbationReport rep = perturb_follower(data, eq, fps, {0.5, 1.0}, cfg);

  // deterministic family: Delta J1 = eps^2/2 * int |delta|^2 dt, exactly
  for (const auto& e : rep.directions[0].entries) {
    const double oracle = 0.5 * e.epsilon * e.epsilon *
                          trapz_scalar(data.grid, [&](int i) {
                            const double dv = det[i](0, 0);
                            return dv * dv;
                          });
    REQUIRE(e.delta_mean == Catch::Approx(oracle).margin(1e-12));
  }
  // Brownian-gain family: positive, exactly quadratic in eps
  double d_half = 0.0, d_one = 0.0;
  for (const auto& e : rep.directions[1].entries) {
    REQUIRE(e.delta_mean > 0.0);
    if (e.epsilon == 0.5) d_half = e.delta_mean;
    if (e.epsilon == 1.0) d_one = e.delta_mean;
  }
  REQUIRE(d_one / d_half == Catch::Approx(4.0).margin(1e-9));
}

TEST_CASE("perturb_follower: desk instance is optimal and quadratic") {
  ProblemData data = scalar_desk(400);
  EquilibriumSolution eq = solve_equilibrium(data);
  std::vector<FollowerPerturbation> fps;
  fps.push_back({FollowerPerturbation::Kind::Deterministic,
                 MatrixPath::sampled(data.grid,
                                     [](double t) { return scalar(std::cos(3.0 * t)); }),
                 "det"});
  fps.push_back({FollowerPerturbation::Kind::GainTimesBrownian,
                 MatrixPath::constant(data.grid, Matrix::Constant(1, 1, 0.6)), "gW"});
  SimConfig cfg = small_cfg(4000, 11);
  PerturbationReport rep = perturb_follower(data, eq, fps, {0.5, 1.0}, cfg);
  for (const auto& dr : rep.directions) {
    double d_half = 0.0, d_one = 0.0;
    for (const auto& e : dr.entries) {
      REQUIRE(e.delta_mean >= -2.0 * e.delta_se - 1e-12);
      if (e.epsilon == 0.5) d_half = e.delta_mean;
      if (e.epsilon == 1.0) d_one = e.delta_mean;
    }
    REQUIRE(d_half > 0.0);
    const double ratio = d_one / d_half;
    REQUIRE(ratio >= 3.5);
    REQUIRE(ratio <= 4.5);
  }
}

TEST_CASE("Euler bias on a zero-diffusion instance halves with the step") {
  auto terminal_error = [](int steps) {
    TimeGrid grid(1.0, steps);
    ProblemData data = scalar_problem(grid, -0.2, 1.0, 0.8, 0, 0, 0, 1.0, 0.1, 1.0, 0.5, 0.8,
                                      0.05, 1.0, 0.4, 1.0);
    EquilibriumSolution eq = solve_equilibrium(data);
    TrajectoryBundle bundle = simulate_closed_loop(data, eq, small_cfg(2));
    // BVP mean path is the RK4 reference for the noiseless closed loop
    return std::abs(bundle.x_mean(0, steps) - eq.leader.bvp.Ex[steps](0, 0));
  };
  const double e1 = terminal_error(250);
  const double e2 = terminal_error(500);
  REQUIRE(e1 / e2 == Catch::Approx(2.0).margin(0.35));
}

TEST_CASE("run_verify: desk instance passes all gates; self test fails the leader gate") {
  ProblemData data = scalar_desk(800);
  EquilibriumSolution eq = solve_equilibrium(data);
  VerifyConfig vcfg;
  vcfg.sim = small_cfg(2000, 5);
  vcfg.leader_direction_count = 2;
  VerifyOutcome ok = run_verify(data, eq, vcfg);
  for (const auto& g : ok.gates) {
    INFO(g.name << " value=" << g.value << " bound=" << g.bound);
    REQUIRE(g.pass);
  }
  REQUIRE(ok.pass);
  REQUIRE(ok.mean_field_x_margin <= 1e-9);
  REQUIRE(ok.mean_field_p_margin <= 1e-9);

  vcfg.perturb_self_test = true;
  VerifyOutcome bad = run_verify(data, eq, vcfg);
  REQUIRE_FALSE(bad.pass);
  bool leader_gate_failed = false;
  for (const auto& g : bad.gates)
    if (!g.pass && g.name.rfind("leader_stationarity_", 0) == 0) leader_gate_failed = true;
  REQUIRE(leader_gate_failed);
}
