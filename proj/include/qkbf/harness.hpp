#pragma once

#include <qkbf/filters.hpp>
#include <qkbf/model.hpp>
#include <qkbf/parallel.hpp>
#include <qkbf/quantizer.hpp>
#include <qkbf/riccati.hpp>
#include <qkbf/rng.hpp>
#include <qkbf/semimarkov.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qkbf {

// ---------------------------------------------------------------------------
// Error metric
// ---------------------------------------------------------------------------

/// Trapezoidal integral of |x - xh|^2 over the columns with index <= last.
inline double ise(const Eigen::MatrixXd& x, const Eigen::MatrixXd& xh,
                  double dt, std::optional<std::size_t> last = std::nullopt) {
  if (x.rows() != xh.rows() || x.cols() != xh.cols())
    throw std::invalid_argument("ise: path shapes differ");
  if (x.cols() == 0) return 0.0;
  const auto end = static_cast<Eigen::Index>(
      std::min<std::size_t>(last.value_or(x.cols() - 1), x.cols() - 1));
  double s = 0.0;
  for (Eigen::Index j = 0; j <= end; ++j) {
    const double e = (x.col(j) - xh.col(j)).squaredNorm();
    s += (j == 0 || j == end) ? 0.5 * e : e;
  }
  return end == 0 ? 0.0 : s * dt;
}

/// Last tick index inside [0, t_end].
inline std::size_t last_tick(double t_end, double dt, std::size_t ticks) {
  if (!std::isfinite(t_end)) return ticks;
  const auto j = static_cast<std::size_t>(std::floor(t_end / dt + 1e-9));
  return std::min(j, ticks);
}

/// Sample moments accumulated in a fixed order.
struct Moments {
  std::size_t n = 0;
  std::size_t nonfinite = 0;
  double sum = 0.0;
  double sumsq = 0.0;

  void add(double v) {
    if (!std::isfinite(v)) {
      ++nonfinite;
      return;
    }
    ++n;
    sum += v;
    sumsq += v * v;
  }
  void merge(const Moments& o) {
    n += o.n;
    nonfinite += o.nonfinite;
    sum += o.sum;
    sumsq += o.sumsq;
  }
  /// NaN when any sample was non-finite or nothing was added.
  double mean() const {
    if (nonfinite > 0 || n == 0) return std::numeric_limits<double>::quiet_NaN();
    return sum / static_cast<double>(n);
  }
  /// Standard error of the mean; NaN below two samples.
  double se() const {
    if (nonfinite > 0 || n < 2) return std::numeric_limits<double>::quiet_NaN();
    const double m = sum / static_cast<double>(n);
    const double var =
        std::max(0.0, (sumsq - static_cast<double>(n) * m * m) /
                          static_cast<double>(n - 1));
    return std::sqrt(var / static_cast<double>(n));
  }
};

/// Runs body(run, acc) for every run, with per-block accumulators merged in
/// block order so the result does not depend on the thread count.
template <class Acc, class Init, class Body>
Acc monte_carlo(std::size_t runs, unsigned threads, Init init, Body body,
                std::size_t block = 64) {
  const std::size_t nblocks = (runs + block - 1) / block;
  std::vector<Acc> parts;
  parts.reserve(nblocks);
  for (std::size_t b = 0; b < nblocks; ++b) parts.push_back(init());
  parallel_for(nblocks, threads, [&](std::size_t b) {
    const std::size_t end = std::min(runs, (b + 1) * block);
    for (std::size_t r = b * block; r < end; ++r) body(r, parts[b]);
  });
  Acc total = init();
  for (auto& p : parts) total.merge(p);
  return total;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::string model = "maglev";
  double horizon = 0.02;
  double dt = 1e-4;
  double ode_step = 1e-5;
  int max_depth = 8;
  std::vector<std::size_t> grid_sizes{10, 50, 100};
  std::size_t runs = 10000;
  std::uint64_t seed = 1;
  std::size_t clvq_iterations = 1000000;
  std::size_t eval_samples = 100000;
  std::size_t node_budget = 1000000;
  unsigned threads = 0;
  std::vector<std::string> metrics{"kbf", "quantized", "lmmse"};
  double observation_delay = 0.0;
  bool project_raw_sojourn = false;
  double pi_floor = 1e-12;
  std::string output_dir = "out";

  bool wants(const std::string& m) const {
    return std::find(metrics.begin(), metrics.end(), m) != metrics.end();
  }
  unsigned workers() const { return threads == 0 ? default_threads() : threads; }
  TreeConfig tree_config() const {
    return {horizon, max_depth, dt, ode_step, node_budget, workers()};
  }
  QuantizedOptions quantized_options() const {
    return {observation_delay, project_raw_sojourn};
  }
};

inline void validate_config(const ExperimentConfig& c) {
  if (!(c.horizon > 0.0)) throw std::invalid_argument("horizon must be > 0");
  if (!(c.dt > 0.0)) throw std::invalid_argument("dt must be > 0");
  const double r = c.horizon / c.dt;
  if (std::abs(r - std::round(r)) * c.dt > 1e-12)
    throw std::invalid_argument("dt must divide horizon");
  substeps_per_tick(c.dt, c.ode_step);
  if (c.runs < 1) throw std::invalid_argument("runs must be >= 1");
  if (c.max_depth < 0) throw std::invalid_argument("max_depth must be >= 0");
  if (c.grid_sizes.empty()) throw std::invalid_argument("grid_sizes is empty");
  for (auto nu : c.grid_sizes)
    if (nu < 1) throw std::invalid_argument("grid sizes must be >= 1");
  for (const auto& m : c.metrics)
    if (m != "kbf" && m != "quantized" && m != "lmmse")
      throw std::invalid_argument("unknown metric '" + m + "'");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"model", "horizon", "dt", "ode_step", "max_depth", "grid_sizes",
          "runs", "seed", "clvq_iterations", "eval_samples", "node_budget",
          "threads", "metrics", "observation_delay", "project_raw_sojourn",
          "pi_floor", "output_dir"},
      "config");
  ExperimentConfig c;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("model", c.model);
  get("horizon", c.horizon);
  get("dt", c.dt);
  c.ode_step = c.dt / 10.0;
  get("ode_step", c.ode_step);
  get("max_depth", c.max_depth);
  get("grid_sizes", c.grid_sizes);
  get("runs", c.runs);
  get("seed", c.seed);
  get("clvq_iterations", c.clvq_iterations);
  get("eval_samples", c.eval_samples);
  get("node_budget", c.node_budget);
  get("threads", c.threads);
  get("metrics", c.metrics);
  get("observation_delay", c.observation_delay);
  get("project_raw_sojourn", c.project_raw_sojourn);
  get("pi_floor", c.pi_floor);
  get("output_dir", c.output_dir);
  validate_config(c);
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {{"model", c.model},
          {"horizon", c.horizon},
          {"dt", c.dt},
          {"ode_step", c.ode_step},
          {"max_depth", c.max_depth},
          {"grid_sizes", c.grid_sizes},
          {"runs", c.runs},
          {"seed", c.seed},
          {"clvq_iterations", c.clvq_iterations},
          {"eval_samples", c.eval_samples},
          {"node_budget", c.node_budget},
          {"threads", c.threads},
          {"metrics", c.metrics},
          {"observation_delay", c.observation_delay},
          {"project_raw_sojourn", c.project_raw_sojourn},
          {"pi_floor", c.pi_floor},
          {"output_dir", c.output_dir}};
}

/// Applies "key=value"; the value is read as JSON, falling back to a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override '" + assignment +
                                "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  auto v = nlohmann::json::parse(raw, nullptr, false);
  j[key] = v.is_discarded() ? nlohmann::json(raw) : v;
}

/// Resolves "maglev" or a model file path relative to `base`.
inline SMJLSModel resolve_model(const std::string& spec,
                                const std::filesystem::path& base = {}) {
  if (spec == "maglev") return maglev_preset();
  std::filesystem::path p(spec);
  if (p.is_relative() && !base.empty()) p = base / p;
  return load_model(p.string());
}

// ---------------------------------------------------------------------------
// Grids and trees
// ---------------------------------------------------------------------------

inline std::uint64_t grid_seed(std::uint64_t root, std::size_t nu,
                               std::size_t mode) {
  return derive_seed(root, nu * 64 + mode, Stream::kTraining);
}

inline std::vector<QuantizationGrid> train_grids(const SMJLSModel& model,
                                                 std::size_t nu,
                                                 const ExperimentConfig& c) {
  std::vector<QuantizationGrid> grids(model.n_modes());
  parallel_for(model.n_modes(), c.workers(), [&](std::size_t i) {
    grids[i] = clvq_train(model.sojourns[i], nu, c.clvq_iterations,
                          ClvqSchedule{}, grid_seed(c.seed, nu, i),
                          static_cast<int>(i), c.eval_samples);
  });
  return grids;
}

struct Table1Row {
  std::size_t nu = 0;
  std::vector<double> distortion;
  std::vector<double> se;
};

inline Table1Row table1_row(std::size_t nu,
                            const std::vector<QuantizationGrid>& grids) {
  Table1Row r{nu, {}, {}};
  for (const auto& g : grids) {
    r.distortion.push_back(g.distortion);
    r.se.push_back(g.distortion_se);
  }
  return r;
}

inline std::vector<Table1Row> table1(const SMJLSModel& model,
                                     const ExperimentConfig& c) {
  std::vector<Table1Row> rows;
  for (auto nu : c.grid_sizes) rows.push_back(table1_row(nu, train_grids(model, nu, c)));
  return rows;
}

inline void write_table1_csv(std::ostream& os,
                             const std::vector<Table1Row>& rows) {
  os.precision(10);
  const std::size_t nm = rows.empty() ? 0 : rows[0].distortion.size();
  os << "nu";
  for (std::size_t i = 0; i < nm; ++i)
    os << ",error_mode" << i + 1 << ",se_mode" << i + 1;
  os << '\n';
  for (const auto& r : rows) {
    os << r.nu;
    for (std::size_t i = 0; i < nm; ++i)
      os << ',' << r.distortion[i] << ',' << r.se[i];
    os << '\n';
  }
}

struct Table2Row {
  std::size_t nu = 0;
  std::vector<std::size_t> below;      // codewords strictly below T
  std::vector<std::size_t> effective;  // with T appended
  std::size_t branches = 0;
  bool budget_exceeded = false;
};

inline Table2Row table2_row(std::size_t nu, const BranchTree& tree) {
  const auto s = tree.stats();
  return {nu, s.codewords_below, s.effective_points, s.nodes, false};
}

/// Builds the tree and summarizes it; budget overruns become flagged rows.
inline Table2Row table2_row(std::size_t nu, const SMJLSModel& model,
                            const std::vector<QuantizationGrid>& grids,
                            const ExperimentConfig& c,
                            BranchTree* keep = nullptr) {
  try {
    auto tree = build_branch_tree(model, grids, c.tree_config());
    auto row = table2_row(nu, tree);
    if (keep) *keep = std::move(tree);
    return row;
  } catch (const BranchBudgetExceeded& e) {
    Table2Row row;
    row.nu = nu;
    row.below = e.partial().codewords_below;
    row.effective = e.partial().effective_points;
    row.branches = e.partial().nodes;
    row.budget_exceeded = true;
    return row;
  }
}

inline void write_table2_csv(std::ostream& os,
                             const std::vector<Table2Row>& rows) {
  const std::size_t nm = rows.empty() ? 0 : rows[0].below.size();
  os << "nu";
  for (std::size_t i = 0; i < nm; ++i)
    os << ",below_mode" << i + 1 << ",used_mode" << i + 1;
  os << ",branches,budget_exceeded\n";
  for (const auto& r : rows) {
    os << r.nu;
    for (std::size_t i = 0; i < nm; ++i)
      os << ',' << r.below[i] << ',' << r.effective[i];
    os << ',' << r.branches << ',' << (r.budget_exceeded ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Paired simulation
// ---------------------------------------------------------------------------

struct SimulatedRun {
  Trajectory traj;
  TruthPath truth;
};

/// Mode path, initial state and noise of run r, all from independent streams.
inline SimulatedRun simulate_run(const SMJLSModel& model, double horizon,
                                 double dt, std::uint64_t root,
                                 std::size_t r) {
  auto trng = make_rng(root, r, Stream::kTrajectory);
  auto traj = sample_trajectory(model, horizon, 1 << 20, trng);
  auto xrng = make_rng(root, r, Stream::kInitialState);
  const Vector x0 = draw_initial_state(model, xrng);
  const auto noise =
      make_noise(model, horizon, dt, derive_seed(root, r, Stream::kNoise));
  auto truth = simulate_truth(model, traj, noise, dt, x0);
  return {std::move(traj), std::move(truth)};
}

struct SizedTree {
  std::size_t nu = 0;
  const BranchTree* tree = nullptr;
};

struct ComparisonRow {
  double horizon = 0.0;
  std::size_t nu = 0;
  std::size_t branches = 0;
  std::size_t runs = 0;
  Moments kbf, quantized, lmmse;
  Moments q_minus_kbf, lmmse_minus_q;
  std::size_t censored = 0;
  std::size_t warnings = 0;

  double censoring_rate() const {
    return runs ? static_cast<double>(censored) / static_cast<double>(runs) : 0.0;
  }
  bool lmmse_nan() const { return lmmse.nonfinite > 0; }
};

namespace detail {

struct ComparisonAcc {
  std::size_t nt = 0;
  Moments kbf, lmmse;
  std::vector<Moments> q, dq, dl;
  std::vector<std::size_t> censored, warnings;

  explicit ComparisonAcc(std::size_t trees = 0)
      : nt(trees), q(trees), dq(trees), dl(trees), censored(trees),
        warnings(trees) {}
  void merge(const ComparisonAcc& o) {
    kbf.merge(o.kbf);
    lmmse.merge(o.lmmse);
    for (std::size_t i = 0; i < nt; ++i) {
      q[i].merge(o.q[i]);
      dq[i].merge(o.dq[i]);
      dl[i].merge(o.dl[i]);
      censored[i] += o.censored[i];
      warnings[i] += o.warnings[i];
    }
  }
};

}  // namespace detail

/// Paired comparison on shared noise. The quantized error is restricted to
/// t <= T ^ T_{n+1}; the LMMSE is skipped for non-Markov models.
inline std::vector<ComparisonRow> compare_filters(
    const SMJLSModel& model, const std::vector<SizedTree>& trees,
    const ExperimentConfig& c) {
  validate_config(c);
  const bool lmmse_ok = c.wants("lmmse") && model.is_markov();
  std::optional<LmmseSolution> sol;
  if (lmmse_ok)
    sol = solve_lmmse(model, markov_pi(model, c.dt, c.horizon), c.horizon,
                      c.ode_step, c.pi_floor);
  const auto opts = c.quantized_options();
  const std::size_t nt = c.wants("quantized") ? trees.size() : 0;
  const double nan = std::numeric_limits<double>::quiet_NaN();

  auto acc = monte_carlo<detail::ComparisonAcc>(
      c.runs, c.workers(), [nt] { return detail::ComparisonAcc(nt); },
      [&](std::size_t r, detail::ComparisonAcc& a) {
        const auto run = simulate_run(model, c.horizon, c.dt, c.seed, r);
        const auto& x = run.truth.x;
        const auto kb = run_kbf(model, run.traj, run.truth, c.ode_step);
        const double e_kb = ise(x, kb.x_hat, c.dt);
        a.kbf.add(e_kb);
        double e_l = nan;
        if (sol) {
          e_l = ise(x, run_lmmse(model, *sol, run.truth).x_hat, c.dt);
          a.lmmse.add(e_l);
        }
        for (std::size_t i = 0; i < nt; ++i) {
          const auto q = run_quantized(model, *trees[i].tree, run.traj,
                                       run.truth, opts);
          const auto end = last_tick(run.traj.restriction_end(c.max_depth),
                                     c.dt, run.truth.ticks());
          const double e_q = ise(x, q.x_hat, c.dt, end);
          const double e_kb_r = ise(x, kb.x_hat, c.dt, end);
          a.q[i].add(e_q);
          a.dq[i].add(e_q - e_kb_r);
          if (sol) a.dl[i].add(e_l - e_q);
          a.censored[i] += q.censored ? 1 : 0;
          a.warnings[i] += static_cast<std::size_t>(q.warnings);
        }
      });

  std::vector<ComparisonRow> rows;
  for (std::size_t i = 0; i < std::max<std::size_t>(nt, 1); ++i) {
    ComparisonRow row;
    row.horizon = c.horizon;
    row.runs = c.runs;
    row.kbf = acc.kbf;
    row.lmmse = acc.lmmse;
    if (i < nt) {
      row.nu = trees[i].nu;
      row.branches = trees[i].tree->nodes.size();
      row.quantized = acc.q[i];
      row.q_minus_kbf = acc.dq[i];
      row.lmmse_minus_q = acc.dl[i];
      row.censored = acc.censored[i];
      row.warnings = acc.warnings[i];
    }
    rows.push_back(row);
  }
  return rows;
}

namespace detail {

inline void put_cell(std::ostream& os, double v) {
  if (std::isnan(v))
    os << "NaN";
  else
    os << v;
}

}  // namespace detail

inline void write_comparison_csv(std::ostream& os,
                                 const std::vector<ComparisonRow>& rows) {
  os.precision(10);
  os << "T,nu,branches,runs,kbf,kbf_se,quantized,quantized_se,lmmse,lmmse_se,"
        "q_minus_kbf,q_minus_kbf_se,lmmse_minus_q,lmmse_minus_q_se,"
        "censoring_rate,fallback_warnings,lmmse_nonfinite_runs\n";
  for (const auto& r : rows) {
    os << r.horizon << ',' << r.nu << ',' << r.branches << ',' << r.runs;
    for (const Moments* m : {&r.kbf, &r.quantized, &r.lmmse, &r.q_minus_kbf,
                             &r.lmmse_minus_q}) {
      os << ',';
      detail::put_cell(os, m->mean());
      os << ',';
      detail::put_cell(os, m->se());
    }
    os << ',' << r.censoring_rate() << ',' << r.warnings << ','
       << r.lmmse.nonfinite << '\n';
  }
}

// ---------------------------------------------------------------------------
// Error curves
// ---------------------------------------------------------------------------

struct ErrorCurve {
  std::size_t nu = 0;
  std::vector<Moments> riccati;  // ||P_KB - P~|| / ||P_KB|| per tick
  std::vector<Moments> filter;   // |x_KB - x~|^2 per tick
  Moments riccati_sq;            // integral of ||P_KB - P~||^2 per run
};

struct CurveSet {
  double dt = 0.0;
  std::size_t runs = 0;
  std::vector<ErrorCurve> curves;
};

namespace detail {

struct CurveAcc {
  std::vector<ErrorCurve> curves;
  void merge(const CurveAcc& o) {
    for (std::size_t i = 0; i < curves.size(); ++i) {
      for (std::size_t j = 0; j < curves[i].riccati.size(); ++j) {
        curves[i].riccati[j].merge(o.curves[i].riccati[j]);
        curves[i].filter[j].merge(o.curves[i].filter[j]);
      }
      curves[i].riccati_sq.merge(o.curves[i].riccati_sq);
    }
  }
};

}  // namespace detail

/// Per-tick mean errors between the exact and quantized filters, each run
/// contributing only on t <= T ^ T_{n+1}.
inline CurveSet error_curves(const SMJLSModel& model,
                             const std::vector<SizedTree>& trees,
                             const ExperimentConfig& c) {
  validate_config(c);
  const std::size_t n = ticks_for(c.horizon, c.dt);
  const auto opts = c.quantized_options();
  auto init = [&] {
    detail::CurveAcc a;
    for (const auto& t : trees) {
      ErrorCurve e;
      e.nu = t.nu;
      e.riccati.resize(n + 1);
      e.filter.resize(n + 1);
      a.curves.push_back(std::move(e));
    }
    return a;
  };
  auto acc = monte_carlo<detail::CurveAcc>(
      c.runs, c.workers(), init, [&](std::size_t r, detail::CurveAcc& a) {
        const auto run = simulate_run(model, c.horizon, c.dt, c.seed, r);
        const auto kb = run_kbf(model, run.traj, run.truth, c.ode_step);
        const auto end = last_tick(run.traj.restriction_end(c.max_depth), c.dt,
                                   run.truth.ticks());
        for (std::size_t i = 0; i < trees.size(); ++i) {
          const auto q =
              run_quantized(model, *trees[i].tree, run.traj, run.truth, opts);
          auto& cv = a.curves[i];
          double sq = 0.0;
          for (std::size_t j = 0; j <= end; ++j) {
            const double d = sym_norm2(kb.P[j] - q.P[j]);
            cv.riccati[j].add(d / sym_norm2(kb.P[j]));
            const auto col = static_cast<Eigen::Index>(j);
            cv.filter[j].add((kb.x_hat.col(col) - q.x_hat.col(col)).squaredNorm());
            sq += (j == 0 || j == end) ? 0.5 * d * d : d * d;
          }
          cv.riccati_sq.add(end == 0 ? 0.0 : sq * c.dt);
        }
      });
  return {c.dt, c.runs, std::move(acc.curves)};
}

inline void write_curves_csv(std::ostream& os, const CurveSet& set) {
  os.precision(10);
  os << "t";
  for (const auto& cv : set.curves)
    os << ",riccati_nu" << cv.nu << ",riccati_se_nu" << cv.nu << ",filter_nu"
       << cv.nu << ",filter_se_nu" << cv.nu << ",count_nu" << cv.nu;
  os << '\n';
  const std::size_t n = set.curves.empty() ? 0 : set.curves[0].riccati.size();
  for (std::size_t j = 0; j < n; ++j) {
    os << static_cast<double>(j) * set.dt;
    for (const auto& cv : set.curves) {
      os << ',';
      detail::put_cell(os, cv.riccati[j].mean());
      os << ',';
      detail::put_cell(os, cv.riccati[j].se());
      os << ',';
      detail::put_cell(os, cv.filter[j].mean());
      os << ',';
      detail::put_cell(os, cv.filter[j].se());
      os << ',' << cv.riccati[j].n;
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Refinement in grid size and time step
// ---------------------------------------------------------------------------

struct RefinementCell {
  std::size_t nu = 0;
  double dt = 0.0;
  std::size_t branches = 0;
  Moments error;  // integral of ||P_KB - P~||^2 on t <= T ^ T_{n+1}
};

/// The same grids are reused for every dt so only the time step changes
/// along a row.
inline std::vector<RefinementCell> refinement_study(
    const SMJLSModel& model,
    const std::map<std::size_t, std::vector<QuantizationGrid>>& grids,
    const std::vector<double>& dts, const ExperimentConfig& base) {
  std::vector<RefinementCell> cells;
  for (double dt : dts) {
    ExperimentConfig c = base;
    c.dt = dt;
    c.ode_step = dt / 10.0;
    std::vector<BranchTree> built;
    built.reserve(grids.size());
    std::vector<SizedTree> trees;
    for (const auto& [nu, g] : grids) {
      built.push_back(build_branch_tree(model, g, c.tree_config()));
      trees.push_back({nu, &built.back()});
    }
    const auto set = error_curves(model, trees, c);
    for (std::size_t i = 0; i < trees.size(); ++i)
      cells.push_back({trees[i].nu, dt, built[i].nodes.size(),
                       set.curves[i].riccati_sq});
  }
  return cells;
}

inline void write_refinement_csv(std::ostream& os,
                                 const std::vector<RefinementCell>& cells) {
  os.precision(10);
  os << "nu,dt,branches,error,error_se\n";
  for (const auto& c : cells) {
    os << c.nu << ',' << c.dt << ',' << c.branches << ',';
    detail::put_cell(os, c.error.mean());
    os << ',';
    detail::put_cell(os, c.error.se());
    os << '\n';
  }
}

}  // namespace qkbf
