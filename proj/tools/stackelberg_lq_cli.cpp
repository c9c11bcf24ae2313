// Command-line front end: check assumptions, solve the equilibrium, verify it
// by Monte Carlo simulation. Exit codes: 0 success, 1 mathematical or
// statistical failure, 2 input error.

#include <chrono>
#include <optional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "stlq/json_io.hpp"

namespace {

using namespace stlq;
namespace fs = std::filesystem;

double ms_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_check(const std::string& file) {
  ProblemFile pf = load_problem(file);
  AssumptionReport report = validate_assumptions(pf.data, pf.tol);
  if (!report.a22_pass(pf.tol) || !report.a23_pass(pf.tol)) {
    json j{{"schema_version", 1},
           {"assumptions", assumptions_to_json(report, pf.tol)},
           {"first_failure", report.first_failure(pf.tol)}};
    std::cout << j.dump(2) << "\n";
    return 1;
  }
  try {
    EquilibriumSolution eq = solve_equilibrium(pf.data, pf.tol);
    json j{{"schema_version", 1}, {"assumptions", assumptions_to_json(eq.assumptions, pf.tol)}};
    const std::string failure = eq.assumptions.first_failure(pf.tol);
    if (!failure.empty()) j["first_failure"] = failure;
    std::cout << j.dump(2) << "\n";
    return failure.empty() ? 0 : 1;
  } catch (const std::exception& e) {
    json j{{"schema_version", 1},
           {"assumptions", assumptions_to_json(report, pf.tol)},
           {"first_failure", e.what()}};
    std::cout << j.dump(2) << "\n";
    return 1;
  }
}

void dump_solution_csv(const fs::path& dir, const EquilibriumSolution& eq) {
  fs::create_directories(dir);
  auto write_one = [&dir](const char* file, const char* name, const MatrixPath& p) {
    write_csv_file((dir / file).string(), name, p);
  };
  write_one("P.csv", "P", eq.follower.P);
  write_one("P1.csv", "P1", eq.riccati.P1);
  write_one("P2.csv", "P2", eq.riccati.P2);
  write_one("calP.csv", "calP", eq.riccati.calP);
  write_one("phi_star.csv", "phi_star", eq.leader.bvp.phiStar);
  write_one("phi.csv", "phi", eq.leader.bvp.phi);
  write_one("Ex.csv", "Ex", eq.leader.bvp.Ex);
  write_one("Ep.csv", "Ep", eq.leader.bvp.Ep);
  write_one("w_star.csv", "w_star", eq.leader.w_star);
  {
    std::ofstream os(dir / "gains_follower.csv");
    write_csv(os, {{"K_x", &eq.follower.gains.K_x},
                   {"K_w", &eq.follower.gains.K_w},
                   {"K_phi", &eq.follower.gains.K_phi}});
  }
  {
    std::ofstream os(dir / "gains_leader.csv");
    write_csv(os, {{"L_Ex", &eq.leader.gains.L_Ex},
                   {"L_phiStar", &eq.leader.gains.L_phiStar},
                   {"L_Ep", &eq.leader.gains.L_Ep},
                   {"L_phi", &eq.leader.gains.L_phi}});
  }
}

int cmd_solve(const std::string& file, const std::string& out_dir) {
  ProblemFile pf = load_problem(file);
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<EquilibriumSolution> solved;
  try {
    solved = solve_equilibrium(pf.data, pf.tol);
  } catch (const std::exception& e) {
    json j{{"schema_version", 1}, {"error", e.what()}};
    std::cout << j.dump(2) << "\n";
    return 1;
  }
  const EquilibriumSolution& eq = *solved;
  const double solve_ms = ms_since(t0);
  const double residual = riccati_fd_residual(eq.follower.P, pf.data, pf.tol.rcond_floor);

  json report = solve_report_json(pf.data, eq, residual);
  report["timings"] = {{"solve_ms", solve_ms}};
  if (!out_dir.empty()) {
    dump_solution_csv(out_dir, eq);
    std::ofstream os(fs::path(out_dir) / "report.json");
    os << report.dump(2) << "\n";
  }
  std::cout << report.dump(2) << "\n";
  const std::string failure = eq.assumptions.first_failure(pf.tol);
  if (!failure.empty()) {
    std::cerr << "failed: " << failure << "\n";
    return 1;
  }
  return 0;
}

int cmd_verify(const std::string& file, int paths, std::uint64_t seed, bool seed_set,
               bool antithetic, bool self_test, const std::string& out_dir) {
  ProblemFile pf = load_problem(file);
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<EquilibriumSolution> solved;
  try {
    solved = solve_equilibrium(pf.data, pf.tol);
  } catch (const std::exception& e) {
    json j{{"schema_version", 1}, {"error", e.what()}};
    std::cout << j.dump(2) << "\n";
    return 1;
  }
  const EquilibriumSolution& eq = *solved;
  const double solve_ms = ms_since(t0);

  VerifyConfig vcfg;
  vcfg.sim = pf.sim;
  if (paths > 0) vcfg.sim.paths = paths;
  if (seed_set) vcfg.sim.seed = seed;
  if (antithetic) vcfg.sim.antithetic = true;
  vcfg.perturb_self_test = self_test;

  const auto t1 = std::chrono::steady_clock::now();
  VerifyOutcome outcome = run_verify(pf.data, eq, vcfg);
  const double verify_ms = ms_since(t1);

  const double residual = riccati_fd_residual(eq.follower.P, pf.data, pf.tol.rcond_floor);
  json report = verify_report_json(pf.data, eq, outcome, residual);
  report["timings"] = {{"solve_ms", solve_ms}, {"verify_ms", verify_ms}};
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream os(fs::path(out_dir) / "verify_report.json");
    os << report.dump(2) << "\n";
  }
  std::cout << report.dump(2) << "\n";
  if (!outcome.pass) {
    std::cerr << "failed gate: " << outcome.first_failed_gate << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-loop Stackelberg equilibrium solver for linear-quadratic "
               "leader-follower games with a deterministic leader and a stochastic follower"};
  app.require_subcommand(1);

  std::string file, out_dir;
  int paths = 0;
  std::uint64_t seed = 0;
  bool antithetic = false, self_test = false;

  CLI::App* check = app.add_subcommand("check", "validate the standing assumptions");
  check->add_option("file", file, "problem file (JSON)")->required();

  CLI::App* solve = app.add_subcommand("solve", "run the deterministic pipeline");
  solve->add_option("file", file, "problem file (JSON)")->required();
  solve->add_option("--out", out_dir, "output directory for CSV dumps and report.json")
      ->required();

  CLI::App* verify = app.add_subcommand("verify", "Monte Carlo verification of the equilibrium");
  verify->add_option("file", file, "problem file (JSON)")->required();
  verify->add_option("--paths", paths, "Monte Carlo path count (overrides the file)");
  CLI::Option* seed_opt = verify->add_option("--seed", seed, "RNG seed (overrides the file)");
  verify->add_flag("--antithetic", antithetic, "antithetic variate pairing");
  verify->add_flag("--perturb-self-test", self_test,
                   "corrupt w* by +0.5 and require the stationarity gate to fail");
  verify->add_option("--out", out_dir, "optional output directory for verify_report.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (check->parsed()) return cmd_check(file);
    if (solve->parsed()) return cmd_solve(file, out_dir);
    return cmd_verify(file, paths, seed, seed_opt->count() > 0, antithetic, self_test, out_dir);
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeMismatchError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const NotSymmetricError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
