#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "stlq/equilibrium.hpp"
#include "stlq/rng.hpp"

namespace stlq {

struct SimConfig {
  int paths = 10000;
  std::uint64_t seed = 42;
  bool antithetic = false;
  int threads = 0;           // 0: hardware count, capped by STACKELBERG_LQ_THREADS
  int max_stored_paths = 16; // full trajectories kept for diagnostics

  void validate() const {
    if (paths < 2) throw std::invalid_argument("SimConfig: need at least two paths");
    if (antithetic && paths % 2 != 0)
      throw std::invalid_argument("SimConfig: antithetic pairing needs an even path count");
  }
};

/// Worker count: `requested`, else hardware concurrency, always capped by the
/// STACKELBERG_LQ_THREADS environment variable when set.
inline int effective_threads(int requested) {
  int t = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  if (t < 1) t = 1;
  if (const char* env = std::getenv("STACKELBERG_LQ_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) t = std::min(t, cap);
  }
  return t;
}

/// One retained trajectory; columns indexed by grid node.
struct PathSample {
  Matrix x;               // n x (N+1)
  Matrix p;               // n x (N+1)
  Matrix y;               // n x (N+1)
  Matrix u;               // k1 x (N+1)
  std::vector<Matrix> z;  // d of n x (N+1)
  Matrix dW;              // d x N
};

/// Monte Carlo output of the closed-loop equilibrium simulation: retained
/// paths, per-sample cost integrals and per-node statistics. With antithetic
/// pairing one "sample" is the average over a +/- pair.
struct TrajectoryBundle {
  TimeGrid grid;
  int path_count = 0;
  int sample_count = 0;  // paths, or pairs when antithetic
  bool antithetic = false;
  std::uint64_t seed = 0;

  std::vector<PathSample> stored;
  std::vector<double> j1_samples;
  std::vector<double> j2_samples;

  Matrix x_mean, x_se;  // n x (N+1)
  Matrix p_mean, p_se;
  Matrix y_mean;
  std::vector<Matrix> z_mean;

  std::vector<double> y_bsde_residual;  // per step, mean over paths
  double y_terminal_gap_ansatz = 0.0;
  double y_terminal_gap_euler = 0.0;
  double p_drift_consistency = 0.0;
  double follower_stationarity_sup = 0.0;  // relative, over all paths and nodes
};

namespace detail {

inline constexpr int kPathBlock = 256;

/// Runs fn(block_index, unit_begin, unit_end) over [0, units) in fixed-size
/// blocks. Threads pull blocks dynamically; anything order-sensitive must be
/// stored per block or per unit and merged afterwards in index order.
template <typename Fn>
void parallel_blocks(int units, int threads, Fn&& fn) {
  const int blocks = (units + kPathBlock - 1) / kPathBlock;
  const int workers = std::max(1, std::min(threads, blocks));
  if (workers == 1) {
    for (int b = 0; b < blocks; ++b)
      fn(b, b * kPathBlock, std::min(units, (b + 1) * kPathBlock));
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int wkr = 0; wkr < workers; ++wkr) {
    pool.emplace_back([&]() {
      int b;
      while ((b = next.fetch_add(1)) < blocks && !failed.load()) {
        try {
          fn(b, b * kPathBlock, std::min(units, (b + 1) * kPathBlock));
        } catch (...) {
          bool expected = false;
          if (failed.compare_exchange_strong(expected, true)) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failed.load()) std::rethrow_exception(error);
}

/// Per-node coefficient tables for the hot loops, with transposes baked in.
struct SimTables {
  int n, k1, k2, d, N;
  double dt, sqrt_dt;
  Vector x0;
  Matrix G1, G2;

  // original coefficients
  std::vector<Matrix> A, B1, B2, Q1, S1, R1, Q2, S2, R2;
  std::vector<std::vector<Matrix>> C, D1, D2;  // [j][node]
  std::vector<Matrix> B1_T;                    // k1 x n
  std::vector<std::vector<Matrix>> D1_T;       // [j][node] k1 x n
  std::vector<Matrix> S2_T;                    // n x k2

  // follower feedback and Riccati
  std::vector<Matrix> Kx, Kw, Kphi, P;

  // deterministic equilibrium paths
  std::vector<Vector> wStar, Ex, Ep, phiStar, phiLdr;

  // leader Riccati and transformed system
  std::vector<Matrix> P1, P2;
  std::vector<Matrix> At_T;                 // n x n
  std::vector<std::vector<Matrix>> Ct_T;    // [j][node]
  std::vector<Matrix> Bt1;                  // n x n (symmetric)
  std::vector<std::vector<Matrix>> Dt1_T;   // [j][node] n x n
  std::vector<std::vector<Matrix>> Zx, Zphi, Zw;  // z coefficients [j][node]

  // p drift (Theorem-form display): dp = Mp p + MEp Ep + Mx x + MEx Ex + Mps phi* + Mph phi
  std::vector<Matrix> Mp, MEp, Mx, MEx, Mps, Mph;
};

inline SimTables build_tables(const ProblemData& data, const EquilibriumSolution& eq) {
  const Dims& dims = data.dims;
  const TimeGrid& grid = data.grid;
  const int n = dims.n, d = dims.d, nodes = grid.node_count();
  SimTables tb;
  tb.n = n;
  tb.k1 = dims.k1;
  tb.k2 = dims.k2;
  tb.d = d;
  tb.N = grid.steps();
  tb.dt = grid.dt();
  tb.sqrt_dt = std::sqrt(grid.dt());
  tb.x0 = data.x0;
  tb.G1 = data.G1;
  tb.G2 = data.G2;

  auto copy_path = [nodes](const MatrixPath& p) {
    std::vector<Matrix> out(static_cast<std::size_t>(nodes));
    for (int i = 0; i < nodes; ++i) out[static_cast<std::size_t>(i)] = p[i];
    return out;
  };
  auto copy_vec_path = [nodes](const MatrixPath& p) {
    std::vector<Vector> out(static_cast<std::size_t>(nodes));
    for (int i = 0; i < nodes; ++i) out[static_cast<std::size_t>(i)] = p[i].col(0);
    return out;
  };

  tb.A = copy_path(data.A);
  tb.B1 = copy_path(data.B1);
  tb.B2 = copy_path(data.B2);
  tb.Q1 = copy_path(data.Q1);
  tb.S1 = copy_path(data.S1);
  tb.R1 = copy_path(data.R1);
  tb.Q2 = copy_path(data.Q2);
  tb.S2 = copy_path(data.S2);
  tb.R2 = copy_path(data.R2);
  tb.C.resize(static_cast<std::size_t>(d));
  tb.D1.resize(static_cast<std::size_t>(d));
  tb.D2.resize(static_cast<std::size_t>(d));
  tb.D1_T.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    tb.C[static_cast<std::size_t>(j)] = copy_path(data.C[static_cast<std::size_t>(j)]);
    tb.D1[static_cast<std::size_t>(j)] = copy_path(data.D1[static_cast<std::size_t>(j)]);
    tb.D2[static_cast<std::size_t>(j)] = copy_path(data.D2[static_cast<std::size_t>(j)]);
    tb.D1_T[static_cast<std::size_t>(j)].resize(static_cast<std::size_t>(nodes));
    for (int i = 0; i < nodes; ++i)
      tb.D1_T[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] =
          data.D1[static_cast<std::size_t>(j)][i].transpose();
  }
  tb.B1_T.resize(static_cast<std::size_t>(nodes));
  tb.S2_T.resize(static_cast<std::size_t>(nodes));
  for (int i = 0; i < nodes; ++i) {
    tb.B1_T[static_cast<std::size_t>(i)] = data.B1[i].transpose();
    tb.S2_T[static_cast<std::size_t>(i)] = data.S2[i].transpose();
  }

  tb.Kx = copy_path(eq.follower.gains.K_x);
  tb.Kw = copy_path(eq.follower.gains.K_w);
  tb.Kphi = copy_path(eq.follower.gains.K_phi);
  tb.P = copy_path(eq.follower.P);

  tb.wStar = copy_vec_path(eq.leader.w_star);
  tb.Ex = copy_vec_path(eq.leader.bvp.Ex);
  tb.Ep = copy_vec_path(eq.leader.bvp.Ep);
  tb.phiStar = copy_vec_path(eq.leader.bvp.phiStar);
  tb.phiLdr = copy_vec_path(eq.leader.bvp.phi);

  tb.P1 = copy_path(eq.riccati.P1);
  tb.P2 = copy_path(eq.riccati.P2);
  tb.Bt1 = copy_path(eq.tilde.B1);
  tb.At_T.resize(static_cast<std::size_t>(nodes));
  for (int i = 0; i < nodes; ++i) tb.At_T[static_cast<std::size_t>(i)] = eq.tilde.A[i].transpose();
  tb.Ct_T.resize(static_cast<std::size_t>(d));
  tb.Dt1_T.resize(static_cast<std::size_t>(d));
  tb.Zx.resize(static_cast<std::size_t>(d));
  tb.Zphi.resize(static_cast<std::size_t>(d));
  tb.Zw.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    auto& ct = tb.Ct_T[static_cast<std::size_t>(j)];
    auto& dt1 = tb.Dt1_T[static_cast<std::size_t>(j)];
    auto& zx = tb.Zx[static_cast<std::size_t>(j)];
    auto& zp = tb.Zphi[static_cast<std::size_t>(j)];
    auto& zw = tb.Zw[static_cast<std::size_t>(j)];
    ct.resize(static_cast<std::size_t>(nodes));
    dt1.resize(static_cast<std::size_t>(nodes));
    zx.resize(static_cast<std::size_t>(nodes));
    zp.resize(static_cast<std::size_t>(nodes));
    zw.resize(static_cast<std::size_t>(nodes));
    for (int i = 0; i < nodes; ++i) {
      const Matrix PS = eq.riccati.P1[i] + eq.riccati.P2[i];
      const Matrix& Ctj = eq.tilde.C[static_cast<std::size_t>(j)][i];
      const Matrix& Dt1j = eq.tilde.D1[static_cast<std::size_t>(j)][i];
      const Matrix& Dt2j = eq.tilde.D2[static_cast<std::size_t>(j)][i];
      ct[static_cast<std::size_t>(i)] = Ctj.transpose();
      dt1[static_cast<std::size_t>(i)] = Dt1j.transpose();
      zx[static_cast<std::size_t>(i)] = PS * Ctj;
      zp[static_cast<std::size_t>(i)] = PS * Dt1j;
      zw[static_cast<std::size_t>(i)] = PS * Dt2j;
    }
  }

  // p drift in the mean-field form: coefficients of (p, Ep, x, Ex, phi*, phi).
  tb.Mp.resize(static_cast<std::size_t>(nodes));
  tb.MEp.resize(static_cast<std::size_t>(nodes));
  tb.Mx.resize(static_cast<std::size_t>(nodes));
  tb.MEx.resize(static_cast<std::size_t>(nodes));
  tb.Mps.resize(static_cast<std::size_t>(nodes));
  tb.Mph.resize(static_cast<std::size_t>(nodes));
  for (int i = 0; i < nodes; ++i) {
    const Matrix PS = eq.riccati.P1[i] + eq.riccati.P2[i];
    const Matrix& Bt1 = eq.tilde.B1[i];
    const Matrix& Bt2 = eq.tilde.B2[i];
    const Matrix& Gam = eq.tilde.Gamma[i];
    const Matrix R2t = enforce_symmetry(eq.bar.R2t[i]);
    const Matrix D1PD2 = eq.bar.D2PD1[i].transpose();  // n x k2, (D1~)'PS D2~
    const std::string label = "R2 tilde at t = " + std::to_string(data.grid.node(i));
    const Matrix Rinv_GamT =
        solve_linear(R2t, Matrix(Gam.transpose()), eq.tol.rcond_floor, label);
    const Matrix Rinv_S2b = solve_linear(R2t, eq.bar.S2[i], eq.tol.rcond_floor, label);
    const Matrix Rinv_Bt2T =
        solve_linear(R2t, Matrix(Bt2.transpose()), eq.tol.rcond_floor, label);

    Matrix D1PC = Matrix::Zero(tb.n, tb.n);  // sum_j (D1~^j)' PS C~^j
    for (int j = 0; j < d; ++j)
      D1PC += eq.tilde.D1[static_cast<std::size_t>(j)][i].transpose() * PS *
              eq.tilde.C[static_cast<std::size_t>(j)][i];

    tb.Mp[static_cast<std::size_t>(i)] = eq.tilde.A[i].transpose();
    tb.MEp[static_cast<std::size_t>(i)] = -D1PD2 * Rinv_GamT;
    tb.Mx[static_cast<std::size_t>(i)] = Bt1.transpose() * PS + D1PC;
    tb.MEx[static_cast<std::size_t>(i)] = -(Bt1.transpose() * eq.riccati.P2[i] + D1PD2 * Rinv_S2b);
    tb.Mps[static_cast<std::size_t>(i)] = eq.bar.D1[i];
    tb.Mph[static_cast<std::size_t>(i)] = Bt1 - D1PD2 * Rinv_Bt2T;
  }
  return tb;
}

/// Brownian increments for (sample stream, step): antithetic legs flip sign.
inline void fill_increments(Vector& dW, const SimTables& tb, std::uint64_t seed,
                            std::uint64_t stream, int step, double sign) {
  for (int j = 0; j < tb.d; ++j)
    dW(j) = sign * tb.sqrt_dt *
            counter_normal(seed, stream, static_cast<std::uint32_t>(step),
                           static_cast<std::uint32_t>(j));
}

}  // namespace detail

/// Euler-Maruyama simulation of the closed-loop equilibrium system: per-path
/// state x*, costate p, ansatz pair (y, z), follower control u*, cost
/// integrals and consistency accumulators. Deterministic for fixed
/// (seed, paths, grid) regardless of worker count.
inline TrajectoryBundle simulate_closed_loop(const ProblemData& data,
                                             const EquilibriumSolution& eq, const SimConfig& cfg) {
  cfg.validate();
  const detail::SimTables tb = detail::build_tables(data, eq);
  const int n = tb.n, d = tb.d, N = tb.N;
  const int legs_per_sample = cfg.antithetic ? 2 : 1;
  const int samples = cfg.paths / legs_per_sample;
  const int stored_count = std::min(cfg.max_stored_paths, cfg.paths);

  TrajectoryBundle bundle{data.grid, cfg.paths, samples, cfg.antithetic, cfg.seed,
                          {}, std::vector<double>(static_cast<std::size_t>(samples), 0.0),
                          std::vector<double>(static_cast<std::size_t>(samples), 0.0),
                          {}, {}, {}, {}, {}, {},
                          std::vector<double>(static_cast<std::size_t>(N), 0.0)};
  bundle.stored.resize(static_cast<std::size_t>(stored_count));

  struct BlockAcc {
    Matrix x_sum, x_sq, p_sum, p_sq, y_sum;
    std::vector<Matrix> z_sum;
    std::vector<double> resid_iv;
    double gap_ansatz = 0.0, gap_euler = 0.0;
    double p_consistency = 0.0, stationarity = 0.0;
  };
  const int blocks = (samples + detail::kPathBlock - 1) / detail::kPathBlock;
  std::vector<BlockAcc> accs(static_cast<std::size_t>(blocks));

  auto worker = [&](int block, int begin, int end) {
    BlockAcc& acc = accs[static_cast<std::size_t>(block)];
    acc.x_sum = Matrix::Zero(n, N + 1);
    acc.x_sq = Matrix::Zero(n, N + 1);
    acc.p_sum = Matrix::Zero(n, N + 1);
    acc.p_sq = Matrix::Zero(n, N + 1);
    acc.y_sum = Matrix::Zero(n, N + 1);
    acc.z_sum.assign(static_cast<std::size_t>(d), Matrix::Zero(n, N + 1));
    acc.resid_iv.assign(static_cast<std::size_t>(N), 0.0);

    Vector x(n), p(n), y(n), yb(n), u(tb.k1), q(n), r(tb.k1), dW(d), drift(n), pdrift(n);
    std::vector<Vector> z(static_cast<std::size_t>(d), Vector(n));
    Vector h(n), hb(n), kvec(n), y_prev(n), mart_prev(n);
    Matrix x_pair_sum(n, N + 1), p_pair_sum(n, N + 1);

    for (int s = begin; s < end; ++s) {
      x_pair_sum.setZero();
      p_pair_sum.setZero();
      double j1_pair = 0.0, j2_pair = 0.0;
      for (int leg = 0; leg < legs_per_sample; ++leg) {
        const int path_index = s * legs_per_sample + leg;
        const double sign = (cfg.antithetic && leg == 1) ? -1.0 : 1.0;
        PathSample* store = path_index < stored_count
                                ? &bundle.stored[static_cast<std::size_t>(path_index)]
                                : nullptr;
        if (store) {
          store->x.resize(n, N + 1);
          store->p.resize(n, N + 1);
          store->y.resize(n, N + 1);
          store->u.resize(tb.k1, N + 1);
          store->z.assign(static_cast<std::size_t>(d), Matrix(n, N + 1));
          store->dW.resize(d, N);
        }

        x = tb.x0;
        p.setZero();
        double j1 = 0.0, j2 = 0.0, f1_prev = 0.0, f2_prev = 0.0;
        bool have_prev = false;
        Vector hdt_prev = Vector::Zero(n);

        for (int i = 0; i <= N; ++i) {
          const auto si = static_cast<std::size_t>(i);
          // follower feedback
          u.noalias() = tb.Kx[si] * x;
          u.noalias() += tb.Kw[si] * tb.wStar[si];
          u.noalias() += tb.Kphi[si] * tb.phiStar[si];

          // ansatz adjoints
          y.noalias() = tb.P1[si] * x;
          y.noalias() += tb.P2[si] * (x - tb.Ex[si]);
          y += tb.phiLdr[si];
          for (int j = 0; j < d; ++j) {
            auto& zj = z[static_cast<std::size_t>(j)];
            zj.noalias() = tb.Zx[static_cast<std::size_t>(j)][si] * x;
            zj.noalias() += tb.Zphi[static_cast<std::size_t>(j)][si] * tb.phiStar[si];
            zj.noalias() += tb.Zw[static_cast<std::size_t>(j)][si] * tb.wStar[si];
          }
          if (i == 0) yb = y;

          // backward-equation residual for the previous step
          if (have_prev) {
            acc.resid_iv[static_cast<std::size_t>(i - 1)] +=
                (y - y_prev + hdt_prev - mart_prev).norm();
          }

          // stationarity of the follower optimality condition at this node
          q.noalias() = -(tb.P[si] * x);
          q -= tb.phiStar[si];
          r.noalias() = tb.R1[si] * u;
          r.noalias() += tb.S1[si] * x;
          r.noalias() -= tb.B1_T[si] * q;
          double scale = std::max(1.0, r.cwiseAbs().maxCoeff());
          for (int j = 0; j < d; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            kvec.noalias() = tb.C[sj][si] * x;
            kvec.noalias() += tb.D1[sj][si] * u;
            kvec.noalias() += tb.D2[sj][si] * tb.wStar[si];
            kvec = -(tb.P[si] * kvec).eval();
            r.noalias() -= tb.D1_T[sj][si] * kvec;
            scale = std::max(scale, kvec.cwiseAbs().maxCoeff());
          }
          scale = std::max({scale, x.cwiseAbs().maxCoeff(), u.cwiseAbs().maxCoeff(), 1.0});
          acc.stationarity = std::max(acc.stationarity, r.cwiseAbs().maxCoeff() / scale);

          // p drift: mean-field display form vs adjoint form (consistency)
          pdrift.noalias() = tb.Mp[si] * p;
          pdrift.noalias() += tb.MEp[si] * tb.Ep[si];
          pdrift.noalias() += tb.Mx[si] * x;
          pdrift.noalias() += tb.MEx[si] * tb.Ex[si];
          pdrift.noalias() += tb.Mps[si] * tb.phiStar[si];
          pdrift.noalias() += tb.Mph[si] * tb.phiLdr[si];
          {
            Vector alt = tb.At_T[si] * p;
            alt.noalias() += tb.Bt1[si] * y;  // B1 tilde is symmetric
            for (int j = 0; j < d; ++j)
              alt.noalias() += tb.Dt1_T[static_cast<std::size_t>(j)][si] * z[static_cast<std::size_t>(j)];
            const double rel = (pdrift - alt).cwiseAbs().maxCoeff() /
                               (1.0 + pdrift.cwiseAbs().maxCoeff());
            acc.p_consistency = std::max(acc.p_consistency, rel);
          }

          // running costs (trapezoid)
          const double f1 = x.dot(tb.Q1[si] * x) + 2.0 * u.dot(tb.S1[si] * x) +
                            u.dot(tb.R1[si] * u);
          const double f2 = x.dot(tb.Q2[si] * x) + 2.0 * tb.wStar[si].dot(tb.S2[si] * x) +
                            tb.wStar[si].dot(tb.R2[si] * tb.wStar[si]);
          if (i > 0) {
            j1 += 0.5 * tb.dt * (f1_prev + f1);
            j2 += 0.5 * tb.dt * (f2_prev + f2);
          }
          f1_prev = f1;
          f2_prev = f2;

          if (store) {
            store->x.col(i) = x;
            store->p.col(i) = p;
            store->y.col(i) = y;
            store->u.col(i) = u;
            for (int j = 0; j < d; ++j)
              store->z[static_cast<std::size_t>(j)].col(i) = z[static_cast<std::size_t>(j)];
          }
          x_pair_sum.col(i) += x;
          p_pair_sum.col(i) += p;
          acc.y_sum.col(i) += y;
          for (int j = 0; j < d; ++j)
            acc.z_sum[static_cast<std::size_t>(j)].col(i) += z[static_cast<std::size_t>(j)];

          if (i == N) break;

          // advance
          detail::fill_increments(dW, tb, cfg.seed, static_cast<std::uint64_t>(s), i, sign);
          if (store) store->dW.col(i) = dW;

          // BSDE drift and the Euler-integrated backward equation
          h.noalias() = tb.At_T[si] * y;
          hb.noalias() = tb.At_T[si] * yb;
          for (int j = 0; j < d; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            h.noalias() += tb.Ct_T[sj][si] * z[sj];
            hb.noalias() += tb.Ct_T[sj][si] * z[sj];
          }
          h.noalias() += tb.S2_T[si] * tb.wStar[si];
          hb.noalias() += tb.S2_T[si] * tb.wStar[si];
          h.noalias() += tb.Q2[si] * x;
          hb.noalias() += tb.Q2[si] * x;

          mart_prev.setZero();
          for (int j = 0; j < d; ++j) mart_prev += z[static_cast<std::size_t>(j)] * dW(j);
          y_prev = y;
          hdt_prev = h * tb.dt;
          have_prev = true;
          yb += -tb.dt * hb + mart_prev;

          drift.noalias() = tb.A[si] * x;
          drift.noalias() += tb.B1[si] * u;
          drift.noalias() += tb.B2[si] * tb.wStar[si];
          Vector x_next = x + tb.dt * drift;
          for (int j = 0; j < d; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            kvec.noalias() = tb.C[sj][si] * x;
            kvec.noalias() += tb.D1[sj][si] * u;
            kvec.noalias() += tb.D2[sj][si] * tb.wStar[si];
            x_next += kvec * dW(j);
          }
          p += tb.dt * pdrift;
          x = x_next;
          if (!x.allFinite())
            throw NonFiniteError("simulate_closed_loop: path " + std::to_string(path_index) +
                                 " blew up near node " + std::to_string(i + 1));
        }

        j1 += x.dot(tb.G1 * x);
        j2 += x.dot(tb.G2 * x);
        j1 *= 0.5;
        j2 *= 0.5;
        j1_pair += j1;
        j2_pair += j2;
        acc.gap_ansatz += (y - tb.G2 * x).norm();
        acc.gap_euler += (yb - tb.G2 * x).norm();
      }
      const double inv_legs = 1.0 / legs_per_sample;
      bundle.j1_samples[static_cast<std::size_t>(s)] = j1_pair * inv_legs;
      bundle.j2_samples[static_cast<std::size_t>(s)] = j2_pair * inv_legs;
      acc.x_sum += x_pair_sum * inv_legs;
      acc.x_sq += (x_pair_sum * inv_legs).cwiseAbs2();
      acc.p_sum += p_pair_sum * inv_legs;
      acc.p_sq += (p_pair_sum * inv_legs).cwiseAbs2();
    }
  };

  detail::parallel_blocks(samples, effective_threads(cfg.threads), worker);

  // Deterministic merge in block order.
  Matrix x_sum = Matrix::Zero(n, N + 1), x_sq = Matrix::Zero(n, N + 1);
  Matrix p_sum = Matrix::Zero(n, N + 1), p_sq = Matrix::Zero(n, N + 1);
  Matrix y_sum = Matrix::Zero(n, N + 1);
  std::vector<Matrix> z_sum(static_cast<std::size_t>(d), Matrix::Zero(n, N + 1));
  for (const auto& acc : accs) {
    x_sum += acc.x_sum;
    x_sq += acc.x_sq;
    p_sum += acc.p_sum;
    p_sq += acc.p_sq;
    y_sum += acc.y_sum;
    for (int j = 0; j < d; ++j) z_sum[static_cast<std::size_t>(j)] += acc.z_sum[static_cast<std::size_t>(j)];
    for (int i = 0; i < N; ++i)
      bundle.y_bsde_residual[static_cast<std::size_t>(i)] += acc.resid_iv[static_cast<std::size_t>(i)];
    bundle.y_terminal_gap_ansatz += acc.gap_ansatz;
    bundle.y_terminal_gap_euler += acc.gap_euler;
    bundle.p_drift_consistency = std::max(bundle.p_drift_consistency, acc.p_consistency);
    bundle.follower_stationarity_sup = std::max(bundle.follower_stationarity_sup, acc.stationarity);
  }

  const double inv_s = 1.0 / samples;
  bundle.x_mean = x_sum * inv_s;
  bundle.p_mean = p_sum * inv_s;
  bundle.y_mean = y_sum / cfg.paths;  // y/z sums run over individual legs
  bundle.z_mean.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j)
    bundle.z_mean[static_cast<std::size_t>(j)] = z_sum[static_cast<std::size_t>(j)] / cfg.paths;
  auto se_from = [&](const Matrix& sum, const Matrix& sq, const Matrix& mean) {
    if (samples < 2) return Matrix(Matrix::Zero(n, N + 1));
    Matrix var = (sq * inv_s - mean.cwiseAbs2()) * (static_cast<double>(samples) / (samples - 1));
    return Matrix((var.cwiseMax(0.0) * inv_s).cwiseSqrt());
  };
  bundle.x_se = se_from(x_sum, x_sq, bundle.x_mean);
  bundle.p_se = se_from(p_sum, p_sq, bundle.p_mean);
  for (double& v : bundle.y_bsde_residual) v /= cfg.paths;
  bundle.y_terminal_gap_ansatz /= cfg.paths;
  bundle.y_terminal_gap_euler /= cfg.paths;
  return bundle;
}

/// Monte Carlo cost estimates with standard errors, the closed-form follower
/// value, and the two stationarity diagnostics.
struct CostReport {
  double j1_mean = 0.0, j1_se = 0.0;
  double j2_mean = 0.0, j2_se = 0.0;
  double j1_formula = 0.0;
  double follower_stationarity_sup = 0.0;
  double leader_stationarity_sample = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_se(const std::vector<double>& xs) {
  const auto m = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double v : xs) mean += v;
  mean /= m;
  if (xs.size() < 2) return {mean, 0.0};
  double var = 0.0;
  for (double v : xs) var += (v - mean) * (v - mean);
  var /= (m - 1.0);
  return {mean, std::sqrt(var / m)};
}

inline MatrixPath columns_to_path(const Matrix& columns, const TimeGrid& grid) {
  MatrixPath p(grid, static_cast<int>(columns.rows()), 1);
  for (int i = 0; i < grid.node_count(); ++i) p.set(i, columns.col(i));
  return p;
}

}  // namespace detail

/// Residuals of the five lines of the coupled mean-field system along the
/// simulated paths.
struct MfFbsdeResiduals {
  double forward_consistency = 0.0;  // (i) Euler identity of x*, zero by construction
  double phi_star_ode = 0.0;         // (ii) forward-difference residual of phi*
  double p_drift_consistency = 0.0;  // (iii) display drift vs adjoint drift of p
  double y_bsde_sup = 0.0;           // (iv) sup over steps of mean backward residual
  double y_terminal_gap = 0.0;       //      mean |y_T - G2 x_T| of the Euler BSDE run
  double stationarity_sample = 0.0;  // (v) leader stationarity with sample means
};

inline MfFbsdeResiduals mf_fbsde_residual(const TrajectoryBundle& bundle, const ProblemData& data,
                                          const EquilibriumSolution& eq) {
  MfFbsdeResiduals res;
  const TimeGrid& grid = data.grid;
  const int n = data.dims.n;

  // (ii): forward differences of the BVP solution against the block system.
  for (int i = 0; i < grid.steps(); ++i) {
    Vector v(4 * n), vn(4 * n);
    v << eq.leader.bvp.Ex[i].col(0), eq.leader.bvp.Ep[i].col(0), eq.leader.bvp.phiStar[i].col(0),
        eq.leader.bvp.phi[i].col(0);
    vn << eq.leader.bvp.Ex[i + 1].col(0), eq.leader.bvp.Ep[i + 1].col(0),
        eq.leader.bvp.phiStar[i + 1].col(0), eq.leader.bvp.phi[i + 1].col(0);
    const Vector fd = (vn - v) / grid.dt();
    const Vector rhs = eq.system.curlyA[i] * v;
    res.phi_star_ode =
        std::max(res.phi_star_ode, (fd - rhs).segment(2 * n, n).cwiseAbs().maxCoeff());
  }

  res.p_drift_consistency = bundle.p_drift_consistency;
  for (double v : bundle.y_bsde_residual) res.y_bsde_sup = std::max(res.y_bsde_sup, v);
  res.y_terminal_gap = bundle.y_terminal_gap_euler;

  // (v): stationarity residual with simulated sample means.
  MeanAdjointPaths mean{detail::columns_to_path(bundle.y_mean, grid), {}};
  mean.Ez.reserve(bundle.z_mean.size());
  for (const auto& zm : bundle.z_mean) mean.Ez.push_back(detail::columns_to_path(zm, grid));
  res.stationarity_sample = leader_stationarity_residual(
      eq.leader.w_star, mean, detail::columns_to_path(bundle.x_mean, grid),
      detail::columns_to_path(bundle.p_mean, grid), data, eq.tilde);
  return res;
}

/// Sample means/SEs of both costs plus the follower value formula.
inline CostReport estimate_costs(const TrajectoryBundle& bundle, const ProblemData& data,
                                 const EquilibriumSolution& eq) {
  CostReport report;
  auto [m1, s1] = detail::mean_se(bundle.j1_samples);
  auto [m2, s2] = detail::mean_se(bundle.j2_samples);
  report.j1_mean = m1;
  report.j1_se = s1;
  report.j2_mean = m2;
  report.j2_se = s2;
  report.j1_formula =
      follower_value(eq.follower.P, eq.leader.bvp.phiStar, eq.leader.w_star, data,
                     eq.tol.rcond_floor);
  report.follower_stationarity_sup = bundle.follower_stationarity_sup;
  MeanAdjointPaths mean = analytic_mean_adjoints(eq.riccati, eq.leader.bvp, eq.leader.w_star,
                                                 eq.tilde);
  report.leader_stationarity_sample = leader_stationarity_residual(
      eq.leader.w_star, mean, eq.leader.bvp.Ex, eq.leader.bvp.Ep, data, eq.tilde);
  return report;
}

// ---------------------------------------------------------------------------
// Perturbation analysis (common random numbers throughout)
// ---------------------------------------------------------------------------

struct PerturbationEntry {
  double epsilon = 0.0;
  double delta_mean = 0.0;  // mean of J(perturbed) - J(base)
  double delta_se = 0.0;
};

struct DirectionReport {
  std::string name;
  std::vector<PerturbationEntry> entries;
  double derivative_mean = 0.0;  // central difference at the smallest epsilon
  double derivative_se = 0.0;
  double derivative_epsilon = 0.0;
};

struct PerturbationReport {
  std::vector<DirectionReport> directions;
};

namespace detail {

/// Per-sample leader costs for control path w with the follower best
/// responding (phi_w = affine term for w). CRN: draws depend only on
/// (seed, sample, step, channel).
inline std::vector<double> leader_scenario_costs(const SimTables& tb, const MatrixPath& w,
                                                 const MatrixPath& phi_w, const SimConfig& cfg) {
  const int n = tb.n, d = tb.d, N = tb.N;
  const int legs_per_sample = cfg.antithetic ? 2 : 1;
  const int samples = cfg.paths / legs_per_sample;
  std::vector<double> j2(static_cast<std::size_t>(samples), 0.0);

  std::vector<Vector> wv(static_cast<std::size_t>(N + 1)), pv(static_cast<std::size_t>(N + 1));
  for (int i = 0; i <= N; ++i) {
    wv[static_cast<std::size_t>(i)] = w[i].col(0);
    pv[static_cast<std::size_t>(i)] = phi_w[i].col(0);
  }

  auto worker = [&](int, int begin, int end) {
    Vector x(n), u(tb.k1), dW(d), kvec(n), drift(n);
    for (int s = begin; s < end; ++s) {
      double j2_pair = 0.0;
      for (int leg = 0; leg < legs_per_sample; ++leg) {
        const double sign = (cfg.antithetic && leg == 1) ? -1.0 : 1.0;
        x = tb.x0;
        double acc = 0.0, f2_prev = 0.0;
        for (int i = 0; i <= N; ++i) {
          const auto si = static_cast<std::size_t>(i);
          u.noalias() = tb.Kx[si] * x;
          u.noalias() += tb.Kw[si] * wv[si];
          u.noalias() += tb.Kphi[si] * pv[si];
          const double f2 = x.dot(tb.Q2[si] * x) + 2.0 * wv[si].dot(tb.S2[si] * x) +
                            wv[si].dot(tb.R2[si] * wv[si]);
          if (i > 0) acc += 0.5 * tb.dt * (f2_prev + f2);
          f2_prev = f2;
          if (i == N) break;
          fill_increments(dW, tb, cfg.seed, static_cast<std::uint64_t>(s), i, sign);
          drift.noalias() = tb.A[si] * x;
          drift.noalias() += tb.B1[si] * u;
          drift.noalias() += tb.B2[si] * wv[si];
          Vector x_next = x + tb.dt * drift;
          for (int j = 0; j < d; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            kvec.noalias() = tb.C[sj][si] * x;
            kvec.noalias() += tb.D1[sj][si] * u;
            kvec.noalias() += tb.D2[sj][si] * wv[si];
            x_next += kvec * dW(j);
          }
          x = x_next;
          if (!x.allFinite())
            throw NonFiniteError("leader scenario: path blew up near node " + std::to_string(i));
        }
        acc += x.dot(tb.G2 * x);
        j2_pair += 0.5 * acc;
      }
      j2[static_cast<std::size_t>(s)] = j2_pair / legs_per_sample;
    }
  };
  parallel_blocks(samples, effective_threads(cfg.threads), worker);
  return j2;
}

}  // namespace detail

/// Leader perturbation test: for each deterministic direction and epsilon,
/// re-solve the follower's affine term for w* + eps * delta (the follower
/// re-optimizes), re-simulate with common random numbers and report
/// J2(w* + eps delta) - J2(w*). The derivative estimate is the per-sample
/// central difference at the smallest epsilon.
inline PerturbationReport perturb_leader(const ProblemData& data, const EquilibriumSolution& eq,
                                         const std::vector<MatrixPath>& directions,
                                         const std::vector<double>& epsilons,
                                         const SimConfig& cfg) {
  cfg.validate();
  const detail::SimTables tb = detail::build_tables(data, eq);
  const std::vector<double> base =
      detail::leader_scenario_costs(tb, eq.leader.w_star, eq.leader.bvp.phiStar, cfg);

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
        MatrixPath w(grid, tb.k2, 1);
        for (int i = 0; i < grid.node_count(); ++i) w.set(i, eq.leader.w_star[i] + e * delta[i]);
        const MatrixPath phi_w = solve_phi(eq.tilde, w);
        const std::vector<double> cost = detail::leader_scenario_costs(tb, w, phi_w, cfg);
        std::vector<double> deltas(cost.size());
        for (std::size_t k = 0; k < cost.size(); ++k) deltas[k] = cost[k] - base[k];
        auto [m, se] = detail::mean_se(deltas);
        dr.entries.push_back(PerturbationEntry{e, m, se});
        if (eps < min_eps) min_eps = eps;
        if (eps <= min_eps) (sign > 0 ? plus_min : minus_min) = std::move(deltas);
      }
    }
    if (!plus_min.empty() && !minus_min.empty() && min_eps > 0.0) {
      std::vector<double> deriv(plus_min.size());
      for (std::size_t k = 0; k < deriv.size(); ++k)
        deriv[k] = (plus_min[k] - minus_min[k]) / (2.0 * min_eps);
      auto [m, se] = detail::mean_se(deriv);
      dr.derivative_mean = m;
      dr.derivative_se = se;
      dr.derivative_epsilon = min_eps;
    }
    report.directions.push_back(std::move(dr));
  }
  return report;
}

/// Adapted perturbations of the follower control supported by the test
/// harness: deterministic k1-paths, and g(t) W_t with deterministic k1 x d
/// gain path g.
struct FollowerPerturbation {
  enum class Kind { Deterministic, GainTimesBrownian };
  Kind kind = Kind::Deterministic;
  MatrixPath path;  // k1 x 1 (Deterministic) or k1 x d (GainTimesBrownian)
  std::string name;
};

/// Follower perturbation test: the equilibrium control *process* u*(omega)
/// and the perturbed process u*(omega) + eps delta(omega) are driven through
/// the state equation side by side with identical Brownian increments, so
/// the reported difference J1(u* + eps delta) - J1(u*) is exactly paired.
inline PerturbationReport perturb_follower(const ProblemData& data, const EquilibriumSolution& eq,
                                           const std::vector<FollowerPerturbation>& perturbations,
                                           const std::vector<double>& epsilons,
                                           const SimConfig& cfg) {
  cfg.validate();
  const detail::SimTables tb = detail::build_tables(data, eq);
  const int n = tb.n, d = tb.d, N = tb.N;
  const int legs_per_sample = cfg.antithetic ? 2 : 1;
  const int samples = cfg.paths / legs_per_sample;

  PerturbationReport report;
  for (const auto& pert : perturbations) {
    if (pert.kind == FollowerPerturbation::Kind::Deterministic &&
        (pert.path.rows() != tb.k1 || pert.path.cols() != 1))
      throw ShapeMismatchError("perturb_follower: deterministic direction must be k1 x 1");
    if (pert.kind == FollowerPerturbation::Kind::GainTimesBrownian &&
        (pert.path.rows() != tb.k1 || pert.path.cols() != d))
      throw ShapeMismatchError("perturb_follower: Brownian gain must be k1 x d");

    DirectionReport dr;
    dr.name = pert.name.empty() ? "perturbation" : pert.name;

    auto run_eps = [&](double e) {
      std::vector<double> deltas(static_cast<std::size_t>(samples), 0.0);
      auto worker = [&](int, int begin, int end) {
        Vector xe(n), xp(n), ue(tb.k1), up(tb.k1), deltav(tb.k1), dW(d), W(d), kvec(n), drift(n);
        for (int s = begin; s < end; ++s) {
          double delta_pair = 0.0;
          for (int leg = 0; leg < legs_per_sample; ++leg) {
            const double sign = (cfg.antithetic && leg == 1) ? -1.0 : 1.0;
            xe = tb.x0;
            xp = tb.x0;
            W.setZero();
            double j1e = 0.0, j1p = 0.0, fe_prev = 0.0, fp_prev = 0.0;
            for (int i = 0; i <= N; ++i) {
              const auto si = static_cast<std::size_t>(i);
              ue.noalias() = tb.Kx[si] * xe;
              ue.noalias() += tb.Kw[si] * tb.wStar[si];
              ue.noalias() += tb.Kphi[si] * tb.phiStar[si];
              if (pert.kind == FollowerPerturbation::Kind::Deterministic)
                deltav = pert.path[i].col(0);
              else
                deltav.noalias() = pert.path[i] * W;
              up = ue + e * deltav;
              const double fe = xe.dot(tb.Q1[si] * xe) + 2.0 * ue.dot(tb.S1[si] * xe) +
                                ue.dot(tb.R1[si] * ue);
              const double fp = xp.dot(tb.Q1[si] * xp) + 2.0 * up.dot(tb.S1[si] * xp) +
                                up.dot(tb.R1[si] * up);
              if (i > 0) {
                j1e += 0.5 * tb.dt * (fe_prev + fe);
                j1p += 0.5 * tb.dt * (fp_prev + fp);
              }
              fe_prev = fe;
              fp_prev = fp;
              if (i == N) break;
              detail::fill_increments(dW, tb, cfg.seed, static_cast<std::uint64_t>(s), i, sign);
              // equilibrium leg
              drift.noalias() = tb.A[si] * xe;
              drift.noalias() += tb.B1[si] * ue;
              drift.noalias() += tb.B2[si] * tb.wStar[si];
              Vector xe_next = xe + tb.dt * drift;
              for (int j = 0; j < d; ++j) {
                const auto sj = static_cast<std::size_t>(j);
                kvec.noalias() = tb.C[sj][si] * xe;
                kvec.noalias() += tb.D1[sj][si] * ue;
                kvec.noalias() += tb.D2[sj][si] * tb.wStar[si];
                xe_next += kvec * dW(j);
              }
              // perturbed leg
              drift.noalias() = tb.A[si] * xp;
              drift.noalias() += tb.B1[si] * up;
              drift.noalias() += tb.B2[si] * tb.wStar[si];
              Vector xp_next = xp + tb.dt * drift;
              for (int j = 0; j < d; ++j) {
                const auto sj = static_cast<std::size_t>(j);
                kvec.noalias() = tb.C[sj][si] * xp;
                kvec.noalias() += tb.D1[sj][si] * up;
                kvec.noalias() += tb.D2[sj][si] * tb.wStar[si];
                xp_next += kvec * dW(j);
              }
              xe = xe_next;
              xp = xp_next;
              W += dW;
              if (!xe.allFinite() || !xp.allFinite())
                throw NonFiniteError("perturb_follower: path blew up near node " +
                                     std::to_string(i));
            }
            j1e = 0.5 * (j1e + xe.dot(tb.G1 * xe));
            j1p = 0.5 * (j1p + xp.dot(tb.G1 * xp));
            delta_pair += j1p - j1e;
          }
          deltas[static_cast<std::size_t>(s)] = delta_pair / legs_per_sample;
        }
      };
      detail::parallel_blocks(samples, effective_threads(cfg.threads), worker);
      return deltas;
    };

    double min_eps = std::numeric_limits<double>::infinity();
    std::vector<double> plus_min, minus_min;
    for (double eps : epsilons) {
      for (double sign : {+1.0, -1.0}) {
        std::vector<double> deltas = run_eps(sign * eps);
        auto [m, se] = detail::mean_se(deltas);
        dr.entries.push_back(PerturbationEntry{sign * eps, m, se});
        if (eps < min_eps) min_eps = eps;
        if (eps <= min_eps) (sign > 0 ? plus_min : minus_min) = std::move(deltas);
      }
    }
    if (!plus_min.empty() && !minus_min.empty() && min_eps > 0.0) {
      std::vector<double> deriv(plus_min.size());
      for (std::size_t k = 0; k < deriv.size(); ++k)
        deriv[k] = (plus_min[k] - minus_min[k]) / (2.0 * min_eps);
      auto [m, se] = detail::mean_se(deriv);
      dr.derivative_mean = m;
      dr.derivative_se = se;
      dr.derivative_epsilon = min_eps;
    }
    report.directions.push_back(std::move(dr));
  }
  return report;
}

}  // namespace stlq
