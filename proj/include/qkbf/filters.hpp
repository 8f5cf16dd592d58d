#pragma once

#include <qkbf/linalg.hpp>
#include <qkbf/model.hpp>
#include <qkbf/riccati.hpp>
#include <qkbf/rng.hpp>
#include <qkbf/semimarkov.hpp>

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace qkbf {

/// Wiener increments for one run; column j drives tick [j dt, (j+1) dt).
struct NoiseRealization {
  double step = 0.0;
  Eigen::MatrixXd dw;
  Eigen::MatrixXd dv;
  std::uint64_t seed = 0;

  std::size_t ticks() const { return static_cast<std::size_t>(dw.cols()); }
};

inline NoiseRealization make_noise(const SMJLSModel& model, double horizon,
                                   double dt, std::uint64_t seed) {
  const std::size_t n = ticks_for(horizon, dt);
  NoiseRealization noise;
  noise.step = dt;
  noise.seed = seed;
  noise.dw.resize(model.n3(), static_cast<Eigen::Index>(n));
  noise.dv.resize(model.n4(), static_cast<Eigen::Index>(n));
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, std::sqrt(dt));
  for (Eigen::Index j = 0; j < noise.dw.cols(); ++j) {
    for (Eigen::Index r = 0; r < noise.dw.rows(); ++r) noise.dw(r, j) = g(rng);
    for (Eigen::Index r = 0; r < noise.dv.rows(); ++r) noise.dv(r, j) = g(rng);
  }
  return noise;
}

inline Vector draw_initial_state(const SMJLSModel& model, Rng& rng) {
  const Matrix root = psd_sqrt(model.x0_cov);
  std::normal_distribution<double> g;
  Vector z(model.n1());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = g(rng);
  return model.x0_mean + root * z;
}

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, double time)
      : std::runtime_error(what + " diverged at t=" + std::to_string(time)),
        time_(time) {}
  double time() const { return time_; }

 private:
  double time_;
};

/// State path and observation increments on the dt grid, plus the mode
/// in force during each tick.
struct TruthPath {
  double dt = 0.0;
  Eigen::MatrixXd x;   // n1 x (ticks + 1)
  Eigen::MatrixXd dy;  // n2 x ticks
  std::vector<int> modes;

  std::size_t ticks() const { return modes.size(); }
};

inline std::vector<int> tick_modes(const Trajectory& traj, std::size_t ticks,
                                   double dt) {
  std::vector<int> m(ticks);
  for (std::size_t j = 0; j < ticks; ++j)
    m[j] = mode_at(traj, std::min(static_cast<double>(j) * dt, traj.horizon));
  return m;
}

inline TruthPath simulate_truth(const SMJLSModel& model, const Trajectory& traj,
                                const NoiseRealization& noise, double dt,
                                const Vector& x0) {
  if (std::abs(noise.step - dt) > 1e-15 * dt)
    throw std::invalid_argument("simulate_truth: noise step differs from dt");
  const std::size_t n = noise.ticks();
  TruthPath tp;
  tp.dt = dt;
  tp.modes = tick_modes(traj, n, dt);
  tp.x.resize(model.n1(), static_cast<Eigen::Index>(n + 1));
  tp.dy.resize(model.n2(), static_cast<Eigen::Index>(n));
  Vector x = x0;
  tp.x.col(0) = x;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& m = model.modes[tp.modes[j]];
    const auto c = static_cast<Eigen::Index>(j);
    tp.dy.col(c) = m.C * x * dt + m.D * noise.dv.col(c);
    x = x + m.A * x * dt + m.E * noise.dw.col(c);
    if (!x.allFinite())
      throw DivergenceError("state", static_cast<double>(j + 1) * dt);
    tp.x.col(c + 1) = x;
  }
  return tp;
}

/// K = P C' (D D')^{-1}
inline Matrix kbf_gain(const Matrix& p, const Mode& mode) {
  const Matrix ddt = mode.D * mode.D.transpose();
  return p * mode.C.transpose() * ddt.inverse();
}

enum class FilterKind { kKbf, kQuantized, kLmmse };

inline const char* filter_name(FilterKind k) {
  switch (k) {
    case FilterKind::kKbf:
      return "kbf";
    case FilterKind::kQuantized:
      return "quantized";
    case FilterKind::kLmmse:
      return "lmmse";
  }
  return "?";
}

struct SelectionRecord {
  int k = 0;
  double t_jump = 0.0;
  double t_effective = 0.0;
  double s_effective = 0.0;
  double s_hat = 0.0;
  int node = -1;
  bool fallback = false;
};

struct FilterRun {
  FilterKind kind = FilterKind::kKbf;
  double dt = 0.0;
  Eigen::MatrixXd x_hat;  // n1 x (ticks + 1)
  std::vector<Matrix> P;  // ticks + 1 covariances
  std::vector<double> gain_norm;
  std::vector<SelectionRecord> selection;
  bool censored = false;
  int warnings = 0;

  std::size_t ticks() const {
    return x_hat.cols() == 0 ? 0 : static_cast<std::size_t>(x_hat.cols() - 1);
  }
};

namespace detail {

inline void estimate_step(const SMJLSModel& model, const TruthPath& truth,
                          std::size_t j, const Matrix& gain, Vector& xh) {
  const auto& m = model.modes[truth.modes[j]];
  const auto c = static_cast<Eigen::Index>(j);
  xh = xh + m.A * xh * truth.dt +
       gain * (truth.dy.col(c) - m.C * xh * truth.dt);
}

}  // namespace detail

/// Exact filter driven by the observed mode path. The covariance is
/// restarted in the new mode at every jump, including jumps inside a tick.
inline FilterRun run_kbf(const SMJLSModel& model, const Trajectory& traj,
                         const TruthPath& truth, double ode_step) {
  const double dt = truth.dt;
  const int nsub = substeps_per_tick(dt, ode_step);
  const std::size_t n = truth.ticks();
  std::vector<RiccatiOperator> ops;
  for (const auto& m : model.modes) ops.emplace_back(m);

  FilterRun run;
  run.kind = FilterKind::kKbf;
  run.dt = dt;
  run.x_hat.resize(model.n1(), static_cast<Eigen::Index>(n + 1));
  run.P.reserve(n + 1);
  run.gain_norm.reserve(n + 1);
  Matrix p = symmetrized(model.x0_cov);
  Vector xh = model.x0_mean;
  run.x_hat.col(0) = xh;
  for (std::size_t j = 0; j < n; ++j) {
    const int mode = truth.modes[j];
    const Matrix gain = kbf_gain(p, model.modes[mode]);
    run.P.push_back(p);
    run.gain_norm.push_back(norm2(gain));
    detail::estimate_step(model, truth, j, gain, xh);
    run.x_hat.col(static_cast<Eigen::Index>(j + 1)) = xh;

    const double t0 = static_cast<double>(j) * dt;
    const double t1 = static_cast<double>(j + 1) * dt;
    std::size_t k = traj.jumps_before(t0);
    if (k + 1 >= traj.t_jump.size() || traj.t_jump[k + 1] >= t1) {
      rk4_advance(p, ops[traj.z[k]], dt, nsub);
    } else {
      double t = t0;
      while (k + 1 < traj.t_jump.size() && traj.t_jump[k + 1] < t1) {
        const double len = traj.t_jump[k + 1] - t;
        if (len > 0.0)
          rk4_advance(p, ops[traj.z[k]], len, steps_for(len, ode_step));
        t = traj.t_jump[++k];
      }
      const double len = t1 - t;
      if (len > 0.0)
        rk4_advance(p, ops[traj.z[k]], len, steps_for(len, ode_step));
    }
    if (!p.allFinite()) throw RiccatiBlowUp(t1, traj.z[k]);
  }
  run.P.push_back(p);
  run.gain_norm.push_back(
      norm2(kbf_gain(p, model.modes[truth.modes.empty() ? traj.z[0]
                                                         : truth.modes.back()])));
  return run;
}

struct QuantizedOptions {
  double observation_delay = 0.0;
  bool project_raw_sojourn = false;
};

/// Smallest tick index j with t < j dt.
inline std::size_t effective_tick(double t, double dt) {
  auto j = static_cast<std::size_t>(std::floor(t / dt)) + 1;
  while (j > 0 && static_cast<double>(j - 1) * dt > t) --j;
  while (static_cast<double>(j) * dt <= t) ++j;
  return j;
}

/// Approximate filter reading its covariance from the pre-computed tree.
inline FilterRun run_quantized(const SMJLSModel& model, const BranchTree& tree,
                               const Trajectory& traj, const TruthPath& truth,
                               const QuantizedOptions& opt = {}) {
  const double dt = truth.dt;
  if (std::abs(tree.dt - dt) > 1e-15 * dt)
    throw std::invalid_argument("run_quantized: tree built with another dt");
  const std::size_t n = truth.ticks();
  if (n > tree.n_ticks())
    throw std::invalid_argument("run_quantized: run longer than tree horizon");
  const int root = tree.roots.at(traj.z[0]);
  if (root < 0)
    throw std::invalid_argument("run_quantized: no branch for initial mode");

  FilterRun run;
  run.kind = FilterKind::kQuantized;
  run.dt = dt;
  run.x_hat.resize(model.n1(), static_cast<Eigen::Index>(n + 1));
  run.P.reserve(n + 1);
  run.gain_norm.reserve(n + 1);

  int node = root;
  std::size_t node_tick = 0;
  std::size_t k = 1;  // next jump to process
  double prev_effective = 0.0;
  Vector xh = model.x0_mean;
  run.x_hat.col(0) = xh;

  for (std::size_t j = 0; j <= n; ++j) {
    while (k < traj.t_jump.size() && std::isfinite(traj.t_jump[k])) {
      const double observed = traj.t_jump[k] + opt.observation_delay;
      const std::size_t jt = effective_tick(observed, dt);
      if (jt > j) break;
      SelectionRecord rec;
      rec.k = static_cast<int>(k);
      rec.t_jump = traj.t_jump[k];
      rec.t_effective = static_cast<double>(jt) * dt;
      rec.s_effective = rec.t_effective - prev_effective;
      prev_effective = rec.t_effective;
      const int to = traj.z[k];
      const auto& cur = tree.nodes[node];
      if (cur.depth >= tree.max_depth) {
        run.censored = true;
        rec.node = node;
        rec.s_hat = std::numeric_limits<double>::quiet_NaN();
        run.selection.push_back(rec);
        ++k;
        continue;
      }
      const double s = opt.project_raw_sojourn ? traj.s[k] : rec.s_effective;
      const auto& grid = tree.effective_grids[cur.mode];
      const auto proj = project(grid, s);
      auto c = tree.child(node, static_cast<int>(proj.index), to);
      if (!c) {
        double best = std::numeric_limits<double>::infinity();
        for (int cand : tree.children[node]) {
          if (tree.nodes[cand].mode != to) continue;
          const double d = std::abs(tree.nodes[cand].sojourn - s);
          if (d < best) best = d, c = cand;
        }
        rec.fallback = true;
        ++run.warnings;
      }
      if (c) {
        node = *c;
        node_tick = jt;
      }
      rec.node = node;
      rec.s_hat = c ? tree.nodes[node].sojourn : std::numeric_limits<double>::quiet_NaN();
      run.selection.push_back(rec);
      ++k;
    }
    const auto& path = tree.nodes[node].path;
    const std::size_t idx = std::min(j - node_tick, path.size() - 1);
    const Matrix p = path.value(idx);
    const int mode = j < n ? truth.modes[j] : truth.modes.empty() ? traj.z[0]
                                                                  : truth.modes.back();
    const Matrix gain = kbf_gain(p, model.modes[mode]);
    run.P.push_back(p);
    run.gain_norm.push_back(norm2(gain));
    if (j == n) break;
    detail::estimate_step(model, truth, j, gain, xh);
    run.x_hat.col(static_cast<Eigen::Index>(j + 1)) = xh;
  }
  return run;
}

inline void write_selection_csv(std::ostream& os, const FilterRun& run) {
  os.precision(17);
  os << "k,T_k,T_eff_k,S_eff_k,S_hat_k,node_id,fallback\n";
  for (const auto& r : run.selection)
    os << r.k << ',' << r.t_jump << ',' << r.t_effective << ','
       << r.s_effective << ',' << r.s_hat << ',' << r.node << ','
       << (r.fallback ? 1 : 0) << '\n';
}

// ---------------------------------------------------------------------------
// Markovian LMMSE
// ---------------------------------------------------------------------------

struct MarkovAux {
  Eigen::MatrixXd Lambda;
  Eigen::VectorXd pi0;
  double dt = 0.0;
  std::vector<Eigen::VectorXd> pi_path;

  Eigen::VectorXd pi_at(double t) const {
    const Eigen::MatrixXd e = (t * Lambda).exp();
    return (pi0.transpose() * e).transpose();
  }
};

inline MarkovAux markov_pi(const Eigen::MatrixXd& Lambda,
                           const Eigen::VectorXd& pi0, double dt,
                           double horizon) {
  if (Lambda.rows() != Lambda.cols() || Lambda.rows() != pi0.size())
    throw std::invalid_argument("markov_pi: dimension mismatch");
  MarkovAux aux{Lambda, pi0, dt, {}};
  const std::size_t n = ticks_for(horizon, dt);
  aux.pi_path.reserve(n + 1);
  for (std::size_t j = 0; j <= n; ++j)
    aux.pi_path.push_back(aux.pi_at(static_cast<double>(j) * dt));
  return aux;
}

inline MarkovAux markov_pi(const SMJLSModel& model, double dt, double horizon) {
  const auto gen = generator_matrix(model);
  if (!gen)
    throw std::invalid_argument(
        "LMMSE needs exponential sojourns (a Markov mode process)");
  return markov_pi(*gen, model.init_mode_dist, dt, horizon);
}

/// Coupled covariances P_FC(i, t) and gains K_FC(i, t) on the dt grid.
struct LmmseSolution {
  double dt = 0.0;
  std::vector<std::vector<Matrix>> P;     // [tick][mode]
  std::vector<std::vector<Matrix>> gain;  // [tick][mode]
  bool finite = true;
  double blowup_time = std::numeric_limits<double>::quiet_NaN();
};

inline LmmseSolution solve_lmmse(const SMJLSModel& model, const MarkovAux& aux,
                                 double horizon, double ode_step,
                                 double pi_floor = 1e-12) {
  const double dt = aux.dt;
  const int nsub = substeps_per_tick(dt, ode_step);
  const std::size_t n = ticks_for(horizon, dt);
  const auto nm = model.n_modes();
  std::vector<Matrix> q(nm), rinv(nm), ct(nm);
  for (std::size_t i = 0; i < nm; ++i) {
    const auto& m = model.modes[i];
    q[i] = m.E * m.E.transpose();
    rinv[i] = (m.D * m.D.transpose()).inverse();
    ct[i] = m.C.transpose();
  }
  const auto& L = aux.Lambda;

  auto rhs = [&](const std::vector<Matrix>& p, const Eigen::VectorXd& pi) {
    std::vector<Matrix> out(nm);
    for (std::size_t i = 0; i < nm; ++i) {
      const auto& m = model.modes[i];
      const auto ii = static_cast<Eigen::Index>(i);
      if (pi(ii) < pi_floor)
        throw std::domain_error("LMMSE: mode probability below floor");
      Matrix ap = m.A * p[i];
      Matrix r = ap + ap.transpose() + q[i] * pi(ii) -
                 p[i] * ct[i] * (rinv[i] / pi(ii)) * m.C * p[i];
      for (std::size_t jm = 0; jm < nm; ++jm)
        r += p[jm] * L(static_cast<Eigen::Index>(jm), ii);
      symmetrize(r);
      out[i] = r;
    }
    return out;
  };
  auto axpy = [&](const std::vector<Matrix>& a, double h,
                  const std::vector<Matrix>& b) {
    std::vector<Matrix> out(nm);
    for (std::size_t i = 0; i < nm; ++i) out[i] = a[i] + h * b[i];
    return out;
  };
  auto gains = [&](const std::vector<Matrix>& p, const Eigen::VectorXd& pi) {
    std::vector<Matrix> g(nm);
    for (std::size_t i = 0; i < nm; ++i) {
      const double w = pi(static_cast<Eigen::Index>(i));
      if (w < pi_floor)
        throw std::domain_error("LMMSE: mode probability below floor");
      g[i] = p[i] * ct[i] * (rinv[i] / w);
    }
    return g;
  };

  LmmseSolution sol;
  sol.dt = dt;
  std::vector<Matrix> p(nm);
  for (std::size_t i = 0; i < nm; ++i)
    p[i] = model.x0_cov * aux.pi0(static_cast<Eigen::Index>(i));
  const double h = dt / nsub;
  for (std::size_t j = 0; j <= n; ++j) {
    sol.P.push_back(p);
    sol.gain.push_back(gains(p, aux.pi_path[j]));
    if (j == n) break;
    for (int s = 0; s < nsub && sol.finite; ++s) {
      const double t = static_cast<double>(j) * dt + s * h;
      const auto pa = aux.pi_at(t), pm = aux.pi_at(t + 0.5 * h),
                 pb = aux.pi_at(t + h);
      const auto k1 = rhs(p, pa);
      const auto k2 = rhs(axpy(p, 0.5 * h, k1), pm);
      const auto k3 = rhs(axpy(p, 0.5 * h, k2), pm);
      const auto k4 = rhs(axpy(p, h, k3), pb);
      for (std::size_t i = 0; i < nm; ++i) {
        p[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        symmetrize(p[i]);
        if (!p[i].allFinite()) sol.finite = false;
      }
    }
    if (!sol.finite && std::isnan(sol.blowup_time))
      sol.blowup_time = static_cast<double>(j + 1) * dt;
  }
  return sol;
}

/// Estimate with the gain of the observed mode. Non-finite values are
/// propagated rather than reported as errors.
inline FilterRun run_lmmse(const SMJLSModel& model, const LmmseSolution& sol,
                           const TruthPath& truth) {
  const std::size_t n = truth.ticks();
  if (sol.P.size() < n + 1)
    throw std::invalid_argument("run_lmmse: solution shorter than the run");
  FilterRun run;
  run.kind = FilterKind::kLmmse;
  run.dt = truth.dt;
  run.x_hat.resize(model.n1(), static_cast<Eigen::Index>(n + 1));
  Vector xh = model.x0_mean;
  run.x_hat.col(0) = xh;
  for (std::size_t j = 0; j <= n; ++j) {
    Matrix total = Matrix::Zero(model.n1(), model.n1());
    for (const auto& pi : sol.P[j]) total += pi;
    run.P.push_back(total);
    const int mode = j < n ? truth.modes[j] : truth.modes.back();
    const Matrix& gain = sol.gain[j][mode];
    run.gain_norm.push_back(gain.allFinite() ? norm2(gain)
                                             : std::numeric_limits<double>::infinity());
    if (j == n) break;
    detail::estimate_step(model, truth, j, gain, xh);
    run.x_hat.col(static_cast<Eigen::Index>(j + 1)) = xh;
  }
  return run;
}

inline void write_run_csv(std::ostream& os, const TruthPath& truth,
                          const FilterRun& run) {
  os.precision(17);
  const auto n1 = truth.x.rows();
  os << 't';
  for (Eigen::Index i = 0; i < n1; ++i) os << ",x" << i + 1;
  for (Eigen::Index i = 0; i < n1; ++i) os << ",xhat" << i + 1;
  os << ",P_norm,K_norm\n";
  for (Eigen::Index j = 0; j < run.x_hat.cols(); ++j) {
    os << static_cast<double>(j) * run.dt;
    for (Eigen::Index i = 0; i < n1; ++i) os << ',' << truth.x(i, j);
    for (Eigen::Index i = 0; i < n1; ++i) os << ',' << run.x_hat(i, j);
    const Matrix& p = run.P[static_cast<std::size_t>(j)];
    os << ',' << (p.allFinite() ? sym_norm2(p) : std::numeric_limits<double>::infinity())
       << ',' << run.gain_norm[static_cast<std::size_t>(j)] << '\n';
  }
}

}  // namespace qkbf
