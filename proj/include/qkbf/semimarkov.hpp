#pragma once

#include <qkbf/model.hpp>
#include <qkbf/rng.hpp>

#include <algorithm>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qkbf {

/// One realization of the jump chain, stored as post-jump modes z[k],
/// jump times t_jump[k] (t_jump[0] = 0) and sojourns s[k] (s[0] = 0).
///
/// Sampling stops at the first jump beyond the horizon, which is kept so the
/// trajectory covers [0, horizon]. When n_max jumps happen first the
/// trajectory is censored and only covers [0, t_jump.back()].
struct Trajectory {
  std::vector<int> z;
  std::vector<double> t_jump;
  std::vector<double> s;
  double horizon = 0.0;
  int n_max = 0;
  bool censored = false;

  std::size_t n_jumps() const { return t_jump.size() - 1; }

  /// Number of jumps at times <= t.
  std::size_t jumps_before(double t) const {
    const auto it = std::upper_bound(t_jump.begin() + 1, t_jump.end(), t);
    return static_cast<std::size_t>(it - t_jump.begin()) - 1;
  }

  /// T ∧ T_{n+1}: end of the window where a tree of depth n is not exhausted.
  double restriction_end(int depth) const {
    const auto k = static_cast<std::size_t>(depth) + 1;
    if (k < t_jump.size()) return std::min(horizon, t_jump[k]);
    return censored ? std::min(horizon, t_jump.back()) : horizon;
  }
};

inline int sample_mode(const Eigen::VectorXd& p, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  int last = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0.0) continue;
    acc += p(i);
    last = static_cast<int>(i);
    if (u < acc) return last;
  }
  return last;
}

inline Trajectory sample_trajectory(const SMJLSModel& model, double horizon,
                                    int n_max, Rng& rng) {
  if (!(horizon > 0.0)) throw std::invalid_argument("horizon must be > 0");
  if (n_max < 1) throw std::invalid_argument("n_max must be >= 1");
  Trajectory tr;
  tr.horizon = horizon;
  tr.n_max = n_max;
  tr.z.push_back(sample_mode(model.init_mode_dist, rng));
  tr.t_jump.push_back(0.0);
  tr.s.push_back(0.0);
  for (int k = 1; k <= n_max; ++k) {
    const int cur = tr.z.back();
    const Eigen::VectorXd row = model.embedded.row(cur).transpose();
    if (row.sum() == 0.0) {
      // absorbing single-mode chain: never jumps
      tr.z.push_back(cur);
      tr.t_jump.push_back(std::numeric_limits<double>::infinity());
      tr.s.push_back(std::numeric_limits<double>::infinity());
      return tr;
    }
    double sk = model.sojourns[cur].sample(rng);
    // a zero draw would break strict monotonicity of the jump times
    while (!(sk > 0.0)) sk = model.sojourns[cur].sample(rng);
    const double tk = tr.t_jump.back() + sk;
    tr.z.push_back(sample_mode(row, rng));
    tr.t_jump.push_back(tk);
    tr.s.push_back(sk);
    if (tk > horizon) return tr;
  }
  tr.censored = true;
  return tr;
}

inline Trajectory sample_trajectory(const SMJLSModel& model, double horizon,
                                    int n_max, std::uint64_t seed) {
  Rng rng(seed);
  return sample_trajectory(model, horizon, n_max, rng);
}

/// Mode at time t, with t = T_k resolving to the post-jump mode Z_k.
inline int mode_at(const Trajectory& tr, double t) {
  if (!(t >= 0.0) || t > tr.horizon)
    throw std::out_of_range("mode_at: t=" + std::to_string(t) +
                            " outside [0, horizon]");
  if (tr.censored ? t > tr.t_jump.back() : t >= tr.t_jump.back())
    throw std::out_of_range("mode_at: t=" + std::to_string(t) +
                            " beyond the generated jumps");
  return tr.z[tr.jumps_before(t)];
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& tr) {
  os.precision(17);
  os << "k,Z_k,T_k,S_k\n";
  for (std::size_t k = 0; k < tr.z.size(); ++k)
    os << k << ',' << tr.z[k] + 1 << ',' << tr.t_jump[k] << ',' << tr.s[k]
       << '\n';
}

}  // namespace qkbf
