#pragma once

#include <qkbf/linalg.hpp>
#include <qkbf/model.hpp>
#include <qkbf/parallel.hpp>
#include <qkbf/quantizer.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qkbf {

/// R(P, i) = A P + P A' + E E' - P C' (D D')^{-1} C P for one frozen mode.
class RiccatiOperator {
 public:
  RiccatiOperator() = default;
  explicit RiccatiOperator(const Mode& m) {
    if (m.A.rows() != m.A.cols() || m.C.cols() != m.A.rows() ||
        m.E.rows() != m.A.rows() || m.D.rows() != m.C.rows())
      throw std::invalid_argument("RiccatiOperator: inconsistent dimensions");
    a_ = m.A;
    q_ = m.E * m.E.transpose();
    const Matrix ddt = m.D * m.D.transpose();
    const Matrix ct_rinv = m.C.transpose() * ddt.inverse();
    s_ = ct_rinv * m.C;
    symmetrize(q_);
    symmetrize(s_);
  }

  Eigen::Index dim() const { return a_.rows(); }

  Matrix operator()(const Matrix& p) const {
    if (p.rows() != a_.rows() || p.cols() != a_.rows())
      throw std::invalid_argument("riccati_rhs: dimension mismatch");
    Matrix ap = a_ * p;
    Matrix r = ap + ap.transpose() + q_ - p * s_ * p;
    symmetrize(r);
    return r;
  }

 private:
  Matrix a_, q_, s_;
};

inline Matrix riccati_rhs(const Matrix& p, const Mode& mode) {
  return RiccatiOperator(mode)(p);
}

/// One classical RK4 step, symmetrized.
inline void rk4_step(Matrix& p, const RiccatiOperator& op, double h) {
  const Matrix k1 = op(p);
  const Matrix k2 = op(p + 0.5 * h * k1);
  const Matrix k3 = op(p + 0.5 * h * k2);
  const Matrix k4 = op(p + h * k3);
  p += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  symmetrize(p);
}

/// Integrates over `duration` with `nsteps` equal RK4 steps.
inline void rk4_advance(Matrix& p, const RiccatiOperator& op, double duration,
                        int nsteps) {
  const double h = duration / nsteps;
  for (int k = 0; k < nsteps; ++k) rk4_step(p, op, h);
}

inline int steps_for(double duration, double ode_step) {
  return std::max(1, static_cast<int>(std::ceil(duration / ode_step - 1e-9)));
}

/// Number of dt ticks needed to cover `duration`.
inline std::size_t ticks_for(double duration, double dt) {
  const double r = duration / dt;
  const double near = std::round(r);
  if (std::abs(r - near) <= 1e-9 * std::max(1.0, near))
    return static_cast<std::size_t>(near);
  return static_cast<std::size_t>(std::ceil(r));
}

/// Substeps per tick; ode_step must divide dt.
inline int substeps_per_tick(double dt, double ode_step) {
  if (!(ode_step > 0.0) || ode_step > dt * (1.0 + 1e-12))
    throw std::invalid_argument("ode_step must be in (0, dt]");
  const double r = dt / ode_step;
  const double near = std::round(r);
  if (std::abs(r - near) > 1e-9 * near)
    throw std::invalid_argument("ode_step must divide dt");
  return static_cast<int>(near);
}

class RiccatiBlowUp : public std::runtime_error {
 public:
  RiccatiBlowUp(double time, int mode)
      : std::runtime_error("Riccati solution blew up at t=" +
                           std::to_string(time) + " in mode " +
                           std::to_string(mode + 1)),
        time_(time) {}
  double time() const { return time_; }

 private:
  double time_;
};

/// Riccati flow phi_i(p, j dt) sampled on the dt grid.
class RiccatiPath {
 public:
  RiccatiPath() = default;
  RiccatiPath(int mode, RiccatiOperator op, double dt, double ode_step)
      : mode_(mode), op_(std::move(op)), dt_(dt), ode_step_(ode_step),
        dim_(op_.dim()) {}

  int mode() const { return mode_; }
  double step() const { return dt_; }
  double ode_step() const { return ode_step_; }
  Eigen::Index dim() const { return dim_; }
  std::size_t size() const {
    return dim_ == 0 ? 0 : data_.size() / static_cast<std::size_t>(dim_ * dim_);
  }

  Matrix value(std::size_t j) const {
    if (j >= size()) throw std::out_of_range("RiccatiPath::value");
    Matrix m(dim_, dim_);
    std::memcpy(m.data(), data_.data() + j * dim_ * dim_,
                sizeof(double) * dim_ * dim_);
    return m;
  }

  void push_back(const Matrix& m) {
    data_.insert(data_.end(), m.data(), m.data() + dim_ * dim_);
  }

  /// Value at arbitrary t: nearest lower sample plus one RK4 sub-integration.
  Matrix at(double t) const {
    if (t < 0.0) throw std::out_of_range("RiccatiPath::at: negative time");
    auto j = static_cast<std::size_t>(std::floor(t / dt_ + 1e-9));
    if (j >= size()) j = size() - 1;
    const double rem = t - static_cast<double>(j) * dt_;
    Matrix p = value(j);
    if (rem > 1e-12 * dt_) rk4_advance(p, op_, rem, steps_for(rem, ode_step_));
    return p;
  }

  const std::vector<double>& raw() const { return data_; }
  std::vector<double>& raw() { return data_; }

 private:
  int mode_ = 0;
  RiccatiOperator op_;
  double dt_ = 0.0;
  double ode_step_ = 0.0;
  Eigen::Index dim_ = 0;
  std::vector<double> data_;
};

/// Solves dP/dt = R(P, mode) from p over `duration`, storing every dt tick.
inline RiccatiPath integrate_phi(const Matrix& p, int mode_index,
                                 const RiccatiOperator& op, double duration,
                                 double dt, double ode_step) {
  if (p.rows() != op.dim() || p.cols() != op.dim())
    throw std::invalid_argument("integrate_phi: dimension mismatch");
  const int nsub = substeps_per_tick(dt, ode_step);
  const std::size_t nticks = ticks_for(duration, dt);
  RiccatiPath path(mode_index, op, dt, ode_step);
  Matrix cur = symmetrized(p);
  path.push_back(cur);
  for (std::size_t j = 0; j < nticks; ++j) {
    rk4_advance(cur, op, dt, nsub);
    if (!cur.allFinite())
      throw RiccatiBlowUp(static_cast<double>(j + 1) * dt, mode_index);
    path.push_back(cur);
  }
  return path;
}

inline RiccatiPath integrate_phi(const Matrix& p, int mode_index,
                                 const Mode& mode, double duration, double dt,
                                 double ode_step) {
  return integrate_phi(p, mode_index, RiccatiOperator(mode), duration, dt,
                       ode_step);
}

// ---------------------------------------------------------------------------
// Branch tree
// ---------------------------------------------------------------------------

struct BranchNode {
  int id = 0;
  int parent = -1;
  int depth = 0;
  int mode = 0;
  int point_index = -1;  // index of the incoming sojourn in the parent's grid
  double start = 0.0;    // quantized jump time: sum of incoming sojourns
  double sojourn = std::numeric_limits<double>::quiet_NaN();
  Matrix entry;
  RiccatiPath path;
};

struct TreeConfig {
  double horizon = 0.02;
  int max_depth = 8;
  double dt = 1e-4;
  double ode_step = 1e-5;
  std::size_t node_budget = 1000000;
  unsigned threads = 1;
};

struct TreeStats {
  std::size_t nodes = 0;
  int depth_reached = 0;
  std::vector<std::size_t> codewords_below;   // per mode, strictly < T
  std::vector<std::size_t> effective_points;  // per mode, horizon included
  std::vector<std::size_t> nodes_per_depth;
};

class BranchBudgetExceeded : public std::runtime_error {
 public:
  explicit BranchBudgetExceeded(TreeStats partial)
      : std::runtime_error("branch tree exceeds node budget (" +
                           std::to_string(partial.nodes) +
                           " nodes created, depth " +
                           std::to_string(partial.depth_reached) + ")"),
        partial_(std::move(partial)) {}
  const TreeStats& partial() const { return partial_; }

 private:
  TreeStats partial_;
};

/// Pre-computed Riccati branches indexed by (mode, quantized sojourn)
/// sequences. There is one root per initial mode with positive probability.
/// Each mode's effective grid is its codewords below the horizon plus the
/// horizon itself, and a child exists only when its quantized start time
/// does not exceed the horizon.
struct BranchTree {
  double horizon = 0.0;
  int max_depth = 0;
  double dt = 0.0;
  double ode_step = 0.0;
  Eigen::Index dim = 0;
  std::uint64_t model_hash = 0;
  std::vector<std::size_t> grid_sizes;
  std::vector<std::vector<double>> effective_grids;
  std::vector<int> roots;  // per mode, -1 when the mode cannot start
  std::vector<BranchNode> nodes;
  std::vector<std::vector<int>> children;

  std::size_t n_ticks() const { return ticks_for(horizon, dt); }

  /// Child of `node` reached through grid point `point` into mode `to`.
  std::optional<int> child(int node, int point, int to) const {
    for (int c : children[node])
      if (nodes[c].point_index == point && nodes[c].mode == to) return c;
    return std::nullopt;
  }

  TreeStats stats() const {
    TreeStats s;
    s.nodes = nodes.size();
    for (const auto& g : effective_grids) {
      s.effective_points.push_back(g.size());
      s.codewords_below.push_back(g.empty() ? 0 : g.size() - 1);
    }
    for (const auto& n : nodes) {
      s.depth_reached = std::max(s.depth_reached, n.depth);
      if (s.nodes_per_depth.size() <= static_cast<std::size_t>(n.depth))
        s.nodes_per_depth.resize(n.depth + 1, 0);
      ++s.nodes_per_depth[n.depth];
    }
    return s;
  }
};

inline std::vector<double> effective_grid(const QuantizationGrid& g,
                                          double horizon) {
  std::vector<double> pts(g.points.begin(),
                          g.points.begin() + used_points(g, horizon));
  pts.push_back(horizon);
  return pts;
}

inline BranchTree build_branch_tree(const SMJLSModel& model,
                                    const std::vector<QuantizationGrid>& grids,
                                    const TreeConfig& cfg,
                                    std::optional<Matrix> p0 = std::nullopt) {
  require_valid(model);
  if (grids.size() != model.n_modes())
    throw std::invalid_argument("build_branch_tree: one grid per mode needed");
  if (!(cfg.horizon > 0.0)) throw std::invalid_argument("horizon must be > 0");
  if (cfg.max_depth < 0) throw std::invalid_argument("max_depth must be >= 0");
  substeps_per_tick(cfg.dt, cfg.ode_step);

  BranchTree tree;
  tree.horizon = cfg.horizon;
  tree.max_depth = cfg.max_depth;
  tree.dt = cfg.dt;
  tree.ode_step = cfg.ode_step;
  tree.dim = model.n1();
  tree.model_hash = model_hash(model);
  std::vector<RiccatiOperator> ops;
  for (std::size_t i = 0; i < model.n_modes(); ++i) {
    ops.emplace_back(model.modes[i]);
    tree.grid_sizes.push_back(grids[i].size());
    tree.effective_grids.push_back(effective_grid(grids[i], cfg.horizon));
  }
  const Matrix root_cov = p0 ? *p0 : model.x0_cov;
  const double tol = 1e-12 * cfg.horizon;

  auto fail = [&tree] {
    auto s = tree.stats();
    throw BranchBudgetExceeded(std::move(s));
  };

  std::vector<int> frontier;
  tree.roots.assign(model.n_modes(), -1);
  for (std::size_t i = 0; i < model.n_modes(); ++i) {
    if (!(model.init_mode_dist(i) > 0.0)) continue;
    if (tree.nodes.size() >= cfg.node_budget) fail();
    BranchNode n;
    n.id = static_cast<int>(tree.nodes.size());
    n.mode = static_cast<int>(i);
    n.entry = root_cov;
    tree.roots[i] = n.id;
    frontier.push_back(n.id);
    tree.nodes.push_back(std::move(n));
    tree.children.emplace_back();
  }
  parallel_for(frontier.size(), cfg.threads, [&](std::size_t k) {
    auto& n = tree.nodes[frontier[k]];
    n.path = integrate_phi(n.entry, n.mode, ops[n.mode], cfg.horizon, cfg.dt,
                           cfg.ode_step);
  });

  for (int depth = 1; depth <= cfg.max_depth && !frontier.empty(); ++depth) {
    std::vector<int> next;
    for (int pid : frontier) {
      const int from = tree.nodes[pid].mode;
      const double start = tree.nodes[pid].start;
      const auto& pts = tree.effective_grids[from];
      for (std::size_t p = 0; p < pts.size(); ++p) {
        if (start + pts[p] > cfg.horizon + tol) break;
        for (std::size_t to = 0; to < model.n_modes(); ++to) {
          if (!(model.embedded(from, to) > 0.0)) continue;
          if (tree.nodes.size() >= cfg.node_budget) fail();
          BranchNode c;
          c.id = static_cast<int>(tree.nodes.size());
          c.parent = pid;
          c.depth = depth;
          c.mode = static_cast<int>(to);
          c.point_index = static_cast<int>(p);
          c.start = start + pts[p];
          c.sojourn = pts[p];
          tree.children[pid].push_back(c.id);
          next.push_back(c.id);
          tree.nodes.push_back(std::move(c));
          tree.children.emplace_back();
        }
      }
    }
    parallel_for(next.size(), cfg.threads, [&](std::size_t k) {
      auto& c = tree.nodes[next[k]];
      c.entry = tree.nodes[c.parent].path.at(c.sojourn);
      c.path = integrate_phi(c.entry, c.mode, ops[c.mode], cfg.horizon, cfg.dt,
                             cfg.ode_step);
    });
    frontier = std::move(next);
  }
  return tree;
}

/// Largest spectral norm over every stored matrix of the tree.
inline double tree_pbar_norm(const BranchTree& tree) {
  double best = 0.0;
  for (const auto& n : tree.nodes)
    for (std::size_t j = 0; j < n.path.size(); ++j)
      best = std::max(best, sym_norm2(n.path.value(j)));
  return best;
}

// ---------------------------------------------------------------------------
// Empirical regularity of the flow
// ---------------------------------------------------------------------------

struct LipschitzSample {
  int mode;
  Matrix p, p_hat;
  double t, t_hat;
};

struct LipschitzDiagnostic {
  double ell_hat = 0.0;
  double eta_hat = 0.0;
  double pbar_norm = 0.0;
  std::size_t time_pairs = 0;
  std::size_t state_pairs = 0;
};

inline Matrix phi(const RiccatiOperator& op, Matrix p, double t,
                  double ode_step) {
  if (t > 0.0) rk4_advance(p, op, t, steps_for(t, ode_step));
  return p;
}

/// Largest observed ratios |phi(p,t)-phi(p,t^)| / |t-t^| and
/// |phi(p,t)-phi(p^,t)| / |p-p^|; degenerate pairs are skipped.
inline LipschitzDiagnostic empirical_lipschitz(
    const SMJLSModel& model, const std::vector<LipschitzSample>& samples,
    double ode_step, const BranchTree* tree = nullptr) {
  std::vector<RiccatiOperator> ops;
  for (const auto& m : model.modes) ops.emplace_back(m);
  LipschitzDiagnostic d;
  for (const auto& s : samples) {
    const auto& op = ops.at(s.mode);
    const Matrix a = phi(op, s.p, s.t, ode_step);
    d.pbar_norm = std::max(d.pbar_norm, sym_norm2(a));
    if (s.t != s.t_hat) {
      const Matrix b = phi(op, s.p, s.t_hat, ode_step);
      d.ell_hat = std::max(d.ell_hat,
                           sym_norm2(a - b) / std::abs(s.t - s.t_hat));
      ++d.time_pairs;
    }
    const double dp = sym_norm2(s.p - s.p_hat);
    if (dp > 0.0) {
      const Matrix c = phi(op, s.p_hat, s.t, ode_step);
      d.eta_hat = std::max(d.eta_hat, sym_norm2(a - c) / dp);
      ++d.state_pairs;
    }
  }
  if (tree) d.pbar_norm = std::max(d.pbar_norm, tree_pbar_norm(*tree));
  return d;
}

// ---------------------------------------------------------------------------
// Persistence (little-endian binary with trailing FNV-1a checksum)
// ---------------------------------------------------------------------------

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(std::ostream& os) : os_(os) {}
  template <class T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    bytes(&v, sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    hash_ = fnv1a(p, n, hash_);
  }
  std::uint64_t hash() const { return hash_; }

 private:
  std::ostream& os_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

class BinReader {
 public:
  explicit BinReader(std::istream& is) : is_(is) {}
  template <class T>
  T get() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is_) throw std::runtime_error("tree file truncated");
    hash_ = fnv1a(p, n, hash_);
  }
  std::uint64_t hash() const { return hash_; }

 private:
  std::istream& is_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline constexpr char kTreeMagic[8] = {'Q', 'K', 'B', 'F', 'T', 'R', 'E', 'E'};
inline constexpr std::uint32_t kTreeVersion = 1;

}  // namespace detail

inline void write_tree(std::ostream& os, const BranchTree& t) {
  detail::BinWriter w(os);
  w.bytes(detail::kTreeMagic, sizeof(detail::kTreeMagic));
  w.put(detail::kTreeVersion);
  w.put(static_cast<std::uint32_t>(t.dim));
  w.put(t.dt);
  w.put(t.ode_step);
  w.put(t.horizon);
  w.put(static_cast<std::uint32_t>(t.max_depth));
  w.put(static_cast<std::uint32_t>(t.effective_grids.size()));
  for (std::size_t i = 0; i < t.effective_grids.size(); ++i) {
    w.put(static_cast<std::uint32_t>(t.grid_sizes[i]));
    w.put(static_cast<std::uint32_t>(t.effective_grids[i].size()));
    w.bytes(t.effective_grids[i].data(),
            sizeof(double) * t.effective_grids[i].size());
    w.put(static_cast<std::int32_t>(t.roots[i]));
  }
  w.put(t.model_hash);
  w.put(static_cast<std::uint64_t>(t.nodes.size()));
  for (const auto& n : t.nodes) {
    w.put(static_cast<std::int64_t>(n.parent));
    w.put(static_cast<std::uint32_t>(n.depth));
    w.put(static_cast<std::uint32_t>(n.mode));
    w.put(static_cast<std::int32_t>(n.point_index));
    w.put(n.start);
    w.put(n.sojourn);
    w.put(static_cast<std::uint64_t>(n.path.size()));
    w.bytes(n.path.raw().data(), sizeof(double) * n.path.raw().size());
  }
  const std::uint64_t h = w.hash();
  os.write(reinterpret_cast<const char*>(&h), sizeof(h));
  if (!os) throw std::runtime_error("failed writing tree");
}

/// Reads a tree; the model supplies the Riccati operators used for
/// off-grid evaluation and must hash to the stored value.
inline BranchTree read_tree(std::istream& is, const SMJLSModel& model) {
  detail::BinReader r(is);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, detail::kTreeMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a branch tree file");
  if (r.get<std::uint32_t>() != detail::kTreeVersion)
    throw std::runtime_error("unsupported tree file version");
  BranchTree t;
  t.dim = r.get<std::uint32_t>();
  t.dt = r.get<double>();
  t.ode_step = r.get<double>();
  t.horizon = r.get<double>();
  t.max_depth = static_cast<int>(r.get<std::uint32_t>());
  const auto nm = r.get<std::uint32_t>();
  if (nm != model.n_modes() || t.dim != model.n1())
    throw std::runtime_error("tree file does not match the model shape");
  for (std::uint32_t i = 0; i < nm; ++i) {
    t.grid_sizes.push_back(r.get<std::uint32_t>());
    std::vector<double> g(r.get<std::uint32_t>());
    r.bytes(g.data(), sizeof(double) * g.size());
    t.effective_grids.push_back(std::move(g));
    t.roots.push_back(r.get<std::int32_t>());
  }
  t.model_hash = r.get<std::uint64_t>();
  if (t.model_hash != model_hash(model))
    throw std::runtime_error("tree was built for a different model");
  std::vector<RiccatiOperator> ops;
  for (const auto& m : model.modes) ops.emplace_back(m);
  const auto count = r.get<std::uint64_t>();
  t.nodes.resize(count);
  t.children.resize(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    auto& n = t.nodes[k];
    n.id = static_cast<int>(k);
    n.parent = static_cast<int>(r.get<std::int64_t>());
    n.depth = static_cast<int>(r.get<std::uint32_t>());
    n.mode = static_cast<int>(r.get<std::uint32_t>());
    n.point_index = r.get<std::int32_t>();
    n.start = r.get<double>();
    n.sojourn = r.get<double>();
    if (n.mode < 0 || n.mode >= static_cast<int>(nm) || n.parent >= n.id)
      throw std::runtime_error("corrupt tree node record");
    n.path = RiccatiPath(n.mode, ops[n.mode], t.dt, t.ode_step);
    const auto samples = r.get<std::uint64_t>();
    n.path.raw().resize(samples * t.dim * t.dim);
    r.bytes(n.path.raw().data(), sizeof(double) * n.path.raw().size());
    n.entry = n.path.value(0);
    if (n.parent >= 0) t.children[n.parent].push_back(n.id);
  }
  const std::uint64_t expect = r.hash();
  std::uint64_t stored = 0;
  is.read(reinterpret_cast<char*>(&stored), sizeof(stored));
  if (!is || stored != expect)
    throw std::runtime_error("tree file checksum mismatch");
  return t;
}

inline void save_tree(const std::string& path, const BranchTree& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write tree file '" + path + "'");
  write_tree(os, t);
}

inline BranchTree load_tree(const std::string& path, const SMJLSModel& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("missing tree file '" + path + "'");
  return read_tree(is, model);
}

inline void print_tree_info(std::ostream& os, const BranchTree& t) {
  const auto s = t.stats();
  os << "horizon " << t.horizon << ", dt " << t.dt << ", ode_step "
     << t.ode_step << ", max depth " << t.max_depth << '\n';
  for (std::size_t i = 0; i < s.effective_points.size(); ++i)
    os << "mode " << i + 1 << ": grid size " << t.grid_sizes[i]
       << ", points below horizon " << s.codewords_below[i]
       << " (+ horizon = " << s.effective_points[i] << ")\n";
  os << "branches " << s.nodes << ", deepest " << s.depth_reached << '\n';
  for (std::size_t d = 0; d < s.nodes_per_depth.size(); ++d)
    os << "  depth " << d << ": " << s.nodes_per_depth[d] << '\n';
}

}  // namespace qkbf
