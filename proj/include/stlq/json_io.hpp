#pragma once

#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stlq/equilibrium.hpp"
#include "stlq/verify.hpp"

namespace stlq {

using nlohmann::json;

/// Parsed problem document: constant coefficients in v1, plus simulation and
/// tolerance blocks with documented defaults.
struct ProblemFile {
  ProblemData data;
  SimConfig sim;
  Tolerances tol;
};

namespace io_detail {

inline Matrix matrix_from_json(const json& node, const std::string& name) {
  if (!node.is_array() || node.empty() || !node[0].is_array())
    throw ParseError("problem file: " + name + " must be a nested array (rows of numbers)");
  const auto rows = node.size();
  const auto cols = node[0].size();
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    if (!node[r].is_array() || node[r].size() != cols)
      throw ParseError("problem file: ragged rows in " + name);
    for (std::size_t c = 0; c < cols; ++c) {
      if (!node[r][c].is_number())
        throw ParseError("problem file: non-numeric entry in " + name);
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = node[r][c].get<double>();
    }
  }
  return m;
}

inline std::vector<Matrix> matrix_list_from_json(const json& node, int expected,
                                                 const std::string& name) {
  if (!node.is_array() || static_cast<int>(node.size()) != expected)
    throw ParseError("problem file: " + name + " must be an array of d matrices");
  std::vector<Matrix> out;
  out.reserve(node.size());
  for (std::size_t j = 0; j < node.size(); ++j)
    out.push_back(matrix_from_json(node[j], name + "[" + std::to_string(j) + "]"));
  return out;
}

inline Vector vector_from_json(const json& node, const std::string& name) {
  if (!node.is_array() || node.empty())
    throw ParseError("problem file: " + name + " must be an array of numbers");
  Vector v(static_cast<Eigen::Index>(node.size()));
  for (std::size_t i = 0; i < node.size(); ++i) {
    if (!node[i].is_number()) throw ParseError("problem file: non-numeric entry in " + name);
    v(static_cast<Eigen::Index>(i)) = node[i].get<double>();
  }
  return v;
}

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json vector_to_json(const Vector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

}  // namespace io_detail

inline ProblemFile parse_problem(const json& doc) {
  using io_detail::matrix_from_json;
  using io_detail::matrix_list_from_json;
  using io_detail::vector_from_json;
  if (!doc.is_object()) throw ParseError("problem file: top level must be an object");
  auto require = [&doc](const char* key) -> const json& {
    auto it = doc.find(key);
    if (it == doc.end()) throw ParseError(std::string("problem file: missing field '") + key + "'");
    return *it;
  };

  const json& jd = require("dims");
  Dims dims;
  try {
    dims.n = jd.at("n").get<int>();
    dims.k1 = jd.at("k1").get<int>();
    dims.k2 = jd.at("k2").get<int>();
    dims.d = jd.at("d").get<int>();
  } catch (const json::exception&) {
    throw ParseError("problem file: dims must contain integers n, k1, k2, d");
  }
  dims.validate();

  if (!require("horizon").is_number() || !require("steps").is_number_integer())
    throw ParseError("problem file: horizon must be a number and steps an integer");
  const double horizon = doc["horizon"].get<double>();
  const int steps = doc["steps"].get<int>();
  if (!(horizon > 0.0) || steps < 1)
    throw ParseError("problem file: horizon must be positive and steps >= 1");
  const TimeGrid grid(horizon, steps);

  ProblemData data = ProblemData::constant(
      dims, grid, vector_from_json(require("x0"), "x0"), matrix_from_json(require("A"), "A"),
      matrix_from_json(require("B1"), "B1"), matrix_from_json(require("B2"), "B2"),
      matrix_list_from_json(require("C"), dims.d, "C"),
      matrix_list_from_json(require("D1"), dims.d, "D1"),
      matrix_list_from_json(require("D2"), dims.d, "D2"), matrix_from_json(require("Q1"), "Q1"),
      matrix_from_json(require("S1"), "S1"), matrix_from_json(require("R1"), "R1"),
      matrix_from_json(require("G1"), "G1"), matrix_from_json(require("Q2"), "Q2"),
      matrix_from_json(require("S2"), "S2"), matrix_from_json(require("R2"), "R2"),
      matrix_from_json(require("G2"), "G2"));

  SimConfig sim;
  if (auto it = doc.find("sim"); it != doc.end()) {
    const json& js = *it;
    sim.paths = js.value("paths", sim.paths);
    sim.seed = js.value("seed", sim.seed);
    sim.antithetic = js.value("antithetic", sim.antithetic);
  }
  Tolerances tol;
  if (auto it = doc.find("tolerances"); it != doc.end()) {
    const json& jt = *it;
    tol.pd_floor = jt.value("pd_floor", tol.pd_floor);
    tol.rcond_floor = jt.value("rcond_floor", tol.rcond_floor);
    tol.det_floor = jt.value("det_floor", tol.det_floor);
    tol.stationarity_se_gate = jt.value("stationarity_se_gate", tol.stationarity_se_gate);
    tol.value_se_gate = jt.value("value_se_gate", tol.value_se_gate);
  }
  return ProblemFile{std::move(data), sim, tol};
}

inline ProblemFile parse_problem_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("problem file: invalid JSON: ") + e.what());
  }
  return parse_problem(doc);
}

inline ProblemFile load_problem(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open problem file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_problem_text(text);
}

/// Serialize back to the v1 constant-coefficient schema (node-0 values).
inline json problem_to_json(const ProblemFile& pf) {
  using io_detail::matrix_to_json;
  using io_detail::vector_to_json;
  const ProblemData& d = pf.data;
  json list_C = json::array(), list_D1 = json::array(), list_D2 = json::array();
  for (int j = 0; j < d.dims.d; ++j) {
    list_C.push_back(matrix_to_json(d.C[static_cast<std::size_t>(j)][0]));
    list_D1.push_back(matrix_to_json(d.D1[static_cast<std::size_t>(j)][0]));
    list_D2.push_back(matrix_to_json(d.D2[static_cast<std::size_t>(j)][0]));
  }
  return json{{"dims", {{"n", d.dims.n}, {"k1", d.dims.k1}, {"k2", d.dims.k2}, {"d", d.dims.d}}},
              {"horizon", d.grid.horizon()},
              {"steps", d.grid.steps()},
              {"x0", vector_to_json(d.x0)},
              {"A", matrix_to_json(d.A[0])},
              {"B1", matrix_to_json(d.B1[0])},
              {"B2", matrix_to_json(d.B2[0])},
              {"C", list_C},
              {"D1", list_D1},
              {"D2", list_D2},
              {"Q1", matrix_to_json(d.Q1[0])},
              {"S1", matrix_to_json(d.S1[0])},
              {"R1", matrix_to_json(d.R1[0])},
              {"G1", matrix_to_json(d.G1)},
              {"Q2", matrix_to_json(d.Q2[0])},
              {"S2", matrix_to_json(d.S2[0])},
              {"R2", matrix_to_json(d.R2[0])},
              {"G2", matrix_to_json(d.G2)},
              {"sim",
               {{"paths", pf.sim.paths}, {"seed", pf.sim.seed}, {"antithetic", pf.sim.antithetic}}},
              {"tolerances",
               {{"pd_floor", pf.tol.pd_floor},
                {"rcond_floor", pf.tol.rcond_floor},
                {"det_floor", pf.tol.det_floor},
                {"stationarity_se_gate", pf.tol.stationarity_se_gate},
                {"value_se_gate", pf.tol.value_se_gate}}}};
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline json assumptions_to_json(const AssumptionReport& r, const Tolerances& tol) {
  json j{{"a22", {{"R1_min_eig", r.a22_R1_min_eig},
                  {"G1_min_eig", r.a22_G1_min_eig},
                  {"schur_min_eig", r.a22_schur_min_eig},
                  {"pass", r.a22_pass(tol)}}},
         {"a23", {{"R2_min_eig", r.a23_R2_min_eig},
                  {"G2_min_eig", r.a23_G2_min_eig},
                  {"schur_min_eig", r.a23_schur_min_eig},
                  {"pass", r.a23_pass(tol)}}}};
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };
  j["a21"] = {{"min_rcond", opt(r.a21_min_rcond)}, {"pass", r.a21_pass(tol)}};
  j["a24"] = {{"min_rcond", opt(r.a24_min_rcond)}, {"pass", r.a24_pass(tol)}};
  j["a25"] = {{"schur_min_eig", opt(r.a25_schur_min_eig)}, {"pass", r.a25_pass(tol)}};
  j["det_condition"] = {{"min", opt(r.det_condition_min)}, {"pass", r.det_pass(tol)}};
  return j;
}

inline json cost_report_to_json(const CostReport& c) {
  return json{{"J1_mc", c.j1_mean},          {"J1_se", c.j1_se},
              {"J2_mc", c.j2_mean},          {"J2_se", c.j2_se},
              {"J1_formula", c.j1_formula},
              {"stationarity_follower", c.follower_stationarity_sup},
              {"stationarity_leader", c.leader_stationarity_sample}};
}

inline json mf_residuals_to_json(const MfFbsdeResiduals& r) {
  return json{{"forward_consistency", r.forward_consistency},
              {"phi_star_ode", r.phi_star_ode},
              {"p_drift_consistency", r.p_drift_consistency},
              {"y_bsde_sup", r.y_bsde_sup},
              {"y_terminal_gap", r.y_terminal_gap},
              {"stationarity_sample", r.stationarity_sample}};
}

inline json perturbation_to_json(const PerturbationReport& p) {
  json dirs = json::array();
  for (const auto& dr : p.directions) {
    json entries = json::array();
    for (const auto& e : dr.entries)
      entries.push_back(json{{"epsilon", e.epsilon},
                             {"delta_mean", e.delta_mean},
                             {"delta_se", e.delta_se}});
    dirs.push_back(json{{"name", dr.name},
                        {"entries", std::move(entries)},
                        {"derivative_mean", dr.derivative_mean},
                        {"derivative_se", dr.derivative_se},
                        {"derivative_epsilon", dr.derivative_epsilon}});
  }
  return json{{"directions", std::move(dirs)}};
}

inline json gates_to_json(const std::vector<GateResult>& gates) {
  json arr = json::array();
  for (const auto& g : gates)
    arr.push_back(json{{"name", g.name}, {"pass", g.pass}, {"value", g.value}, {"bound", g.bound}});
  return arr;
}

/// Deterministic pipeline report for `solve`.
inline json solve_report_json(const ProblemData& data, const EquilibriumSolution& eq,
                              double riccati_residual) {
  json j{{"schema_version", 1},
         {"assumptions", assumptions_to_json(eq.assumptions, eq.tol)},
         {"riccati",
          {{"fd_residual_sup", riccati_residual},
           {"calp_decomposition_max_dev",
            eq.riccati.calP.max_deviation([&] {
              MatrixPath sum(eq.riccati.P1.grid(), eq.riccati.P1.rows(), eq.riccati.P1.cols());
              for (int i = 0; i < sum.node_count(); ++i)
                sum.set(i, eq.riccati.P1[i] + eq.riccati.P2[i]);
              return sum;
            }())},
           {"coupled_crosscheck_dev", eq.riccati.coupled_deviation}}},
         {"det_condition_min", eq.det_condition_min},
         {"bvp",
          {{"terminal_residual", eq.leader.bvp.terminal_residual},
           {"phi_star_0", io_detail::vector_to_json(eq.leader.bvp.phiStar[0].col(0))},
           {"phi_0", io_detail::vector_to_json(eq.leader.bvp.phi[0].col(0))}}},
         {"gains_t0",
          {{"K_x", io_detail::matrix_to_json(eq.follower.gains.K_x[0])},
           {"K_w", io_detail::matrix_to_json(eq.follower.gains.K_w[0])},
           {"K_phi", io_detail::matrix_to_json(eq.follower.gains.K_phi[0])},
           {"L_Ex", io_detail::matrix_to_json(eq.leader.gains.L_Ex[0])},
           {"L_phiStar", io_detail::matrix_to_json(eq.leader.gains.L_phiStar[0])},
           {"L_Ep", io_detail::matrix_to_json(eq.leader.gains.L_Ep[0])},
           {"L_phi", io_detail::matrix_to_json(eq.leader.gains.L_phi[0])}}}};
  (void)data;
  return j;
}

inline json verify_report_json(const ProblemData& data, const EquilibriumSolution& eq,
                               const VerifyOutcome& v, double riccati_residual) {
  json j = solve_report_json(data, eq, riccati_residual);
  j["costs"] = cost_report_to_json(v.cost);
  j["mf_fbsde_residuals"] = mf_residuals_to_json(v.mf);
  j["mean_field"] = {{"x_margin", v.mean_field_x_margin}, {"p_margin", v.mean_field_p_margin}};
  j["perturbation_leader"] = perturbation_to_json(v.leader_perturbation);
  j["perturbation_follower"] = perturbation_to_json(v.follower_perturbation);
  j["gates"] = gates_to_json(v.gates);
  j["pass"] = v.pass;
  if (!v.first_failed_gate.empty()) j["first_failed_gate"] = v.first_failed_gate;
  return j;
}

// ---------------------------------------------------------------------------
// CSV dumps: one row per node, full double precision
// ---------------------------------------------------------------------------

inline void write_csv(std::ostream& os,
                      const std::vector<std::pair<std::string, const MatrixPath*>>& columns) {
  if (columns.empty()) return;
  const TimeGrid& grid = columns.front().second->grid();
  os << "t";
  for (const auto& [name, path] : columns) {
    if (path->rows() == 1 && path->cols() == 1) {
      os << "," << name;
    } else {
      for (int r = 0; r < path->rows(); ++r)
        for (int c = 0; c < path->cols(); ++c) os << "," << name << "_" << r << "_" << c;
    }
  }
  os << "\n";
  char buf[32];
  auto put = [&os, &buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << "," << buf;
  };
  for (int i = 0; i < grid.node_count(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", grid.node(i));
    os << buf;
    for (const auto& [name, path] : columns) {
      const Matrix& m = (*path)[i];
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) put(m(r, c));
    }
    os << "\n";
  }
}

inline void write_csv_file(const std::string& filename, const std::string& name,
                           const MatrixPath& path) {
  std::ofstream os(filename);
  if (!os) throw std::runtime_error("cannot open output file: " + filename);
  write_csv(os, {{name, &path}});
}

}  // namespace stlq
