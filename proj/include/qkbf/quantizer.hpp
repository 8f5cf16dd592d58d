#pragma once

#include <qkbf/model.hpp>
#include <qkbf/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace qkbf {

struct TrainMeta {
  std::string method;
  std::uint64_t iterations = 0;
  std::uint64_t seed = 0;
  double step_exponent = 0.0;
  double step_offset = 0.0;
  double final_fraction = 0.0;
  std::vector<std::string> warnings;
};

/// Sorted codebook for the sojourn law of one mode.
struct QuantizationGrid {
  int mode = 0;
  std::vector<double> points;
  std::vector<double> weights;
  double distortion = 0.0;     // E[|S - proj(S)|^2]^{1/2}
  double distortion_se = 0.0;  // Monte Carlo standard error of the above
  TrainMeta meta;

  std::size_t size() const { return points.size(); }
};

struct Projection {
  std::size_t index;
  double codeword;
};

/// Nearest codeword of a sorted codebook; ties go to the smaller index.
inline Projection project(const std::vector<double>& points, double s) {
  if (points.empty()) throw std::invalid_argument("project: empty grid");
  const auto it = std::lower_bound(points.begin(), points.end(), s);
  if (it == points.begin()) return {0, points.front()};
  if (it == points.end()) return {points.size() - 1, points.back()};
  const auto hi = static_cast<std::size_t>(it - points.begin());
  const std::size_t lo = hi - 1;
  return (s - points[lo] <= points[hi] - s) ? Projection{lo, points[lo]}
                                            : Projection{hi, points[hi]};
}

inline Projection project(const QuantizationGrid& grid, double s) {
  return project(grid.points, s);
}

struct DistortionEstimate {
  double rms = 0.0;
  double se = 0.0;
  std::vector<double> weights;
};

/// Monte Carlo estimate of E[|S - proj(S)|^2]^{1/2}; the standard error of the
/// root comes from the delta method on the mean square.
inline DistortionEstimate distortion_estimate(const std::vector<double>& points,
                                              const SojournDistribution& dist,
                                              std::size_t n_samples,
                                              std::uint64_t seed) {
  if (n_samples < 1000)
    throw std::invalid_argument("distortion_estimate needs >= 1000 samples");
  Rng rng(seed);
  std::vector<double> count(points.size(), 0.0);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double s = dist.sample(rng);
    const auto p = project(points, s);
    const double e2 = (s - p.codeword) * (s - p.codeword);
    sum += e2;
    sum2 += e2 * e2;
    count[p.index] += 1.0;
  }
  const double n = static_cast<double>(n_samples);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum2 / n - mean * mean) * n / (n - 1.0));
  DistortionEstimate out;
  out.rms = std::sqrt(mean);
  const double se_mean = std::sqrt(var / n);
  out.se = out.rms > 0.0 ? se_mean / (2.0 * out.rms) : std::sqrt(se_mean);
  out.weights.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out.weights[i] = count[i] / n;
  return out;
}

inline DistortionEstimate distortion_estimate(const QuantizationGrid& grid,
                                              const SojournDistribution& dist,
                                              std::size_t n_samples,
                                              std::uint64_t seed) {
  return distortion_estimate(grid.points, dist, n_samples, seed);
}

/// Step size (wins + offset)^(-exponent) per codeword; the codebook grows by
/// splitting from one codeword, the last stage taking `final_fraction` of the
/// iterations.
struct ClvqSchedule {
  double exponent = 0.8;
  double offset = 1.0;
  double final_fraction = 0.5;
};

namespace detail {

inline void dedupe_sorted(std::vector<double>& pts,
                          std::vector<std::string>& warnings) {
  std::sort(pts.begin(), pts.end());
  const auto before = pts.size();
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](double a, double b) {
                          return std::abs(a - b) <=
                                 1e-14 * std::max(std::abs(a), std::abs(b));
                        }),
            pts.end());
  if (pts.size() != before)
    warnings.push_back("collapsed " + std::to_string(before - pts.size()) +
                       " duplicate codewords");
}

inline void finish_grid(QuantizationGrid& g, const SojournDistribution& dist,
                        std::size_t eval_samples, std::uint64_t eval_seed) {
  const auto est = distortion_estimate(g.points, dist, eval_samples, eval_seed);
  g.weights = est.weights;
  g.distortion = est.rms;
  g.distortion_se = est.se;
}

// Per-stage statistics of one codeword: squared errors split by side.
struct CellStats {
  double wins = 0.0;
  double n_left = 0.0, sse_left = 0.0;
  double n_right = 0.0, sse_right = 0.0;
};

}  // namespace detail

/// Competitive learning vector quantization of a scalar sojourn law.
inline QuantizationGrid clvq_train(const SojournDistribution& dist,
                                   std::size_t nu, std::uint64_t iters,
                                   const ClvqSchedule& schedule,
                                   std::uint64_t seed, int mode = 0,
                                   std::size_t eval_samples = 100000) {
  if (nu < 1) throw std::invalid_argument("clvq_train: nu must be >= 1");
  if (iters < nu) throw std::invalid_argument("clvq_train: iters < nu");
  if (auto e = dist.parameter_error())
    throw std::invalid_argument("clvq_train: " + *e);

  QuantizationGrid grid;
  grid.mode = mode;
  grid.meta.method = "clvq-split";
  grid.meta.seed = seed;
  grid.meta.step_exponent = schedule.exponent;
  grid.meta.step_offset = schedule.offset;
  grid.meta.final_fraction = schedule.final_fraction;
  const std::uint64_t eval_seed = derive_seed(seed, 0, Stream::kEvaluation);

  if (dist.variance() == 0.0) {
    grid.points = {dist.mean()};
    grid.meta.warnings.push_back(
        "point-mass law: all codewords collapse onto the atom");
    grid.meta.iterations = 0;
    detail::finish_grid(grid, dist, eval_samples, eval_seed);
    return grid;
  }

  Rng rng(derive_seed(seed, 0, Stream::kTraining));

  std::vector<std::size_t> sizes{1};
  while (sizes.back() < nu) sizes.push_back(std::min(2 * sizes.back(), nu));
  std::vector<std::uint64_t> budget(sizes.size(), 0);
  if (sizes.size() == 1) {
    budget[0] = iters;
  } else {
    budget.back() = static_cast<std::uint64_t>(
        static_cast<double>(iters) * schedule.final_fraction);
    const std::uint64_t rest = iters - budget.back();
    const double total = std::accumulate(sizes.begin(), sizes.end() - 1, 0.0);
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k)
      budget[k] = std::max<std::uint64_t>(
          sizes[k], static_cast<std::uint64_t>(
                        static_cast<double>(rest) * sizes[k] / total));
  }

  std::vector<double> g{dist.sample(rng)};
  std::vector<detail::CellStats> stats;
  std::uint64_t done = 0;
  for (std::size_t stage = 0; stage < sizes.size(); ++stage) {
    const std::size_t m = sizes[stage];
    if (m > g.size()) {
      // split the codewords carrying the largest squared error
      std::vector<std::size_t> order(g.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) {
                         return stats[a].sse_left + stats[a].sse_right >
                                stats[b].sse_left + stats[b].sse_right;
                       });
      const std::size_t extra = m - g.size();
      for (std::size_t r = 0; r < extra; ++r) {
        const std::size_t i = order[r % order.size()];
        const auto& c = stats[i];
        const bool right = c.sse_right >= c.sse_left;
        const double n_side = right ? c.n_right : c.n_left;
        const double sse = right ? c.sse_right : c.sse_left;
        double offset = n_side > 0 ? std::sqrt(sse / n_side)
                                   : 1e-3 * std::max(g[i], 1e-12);
        double fresh = right ? g[i] + offset : g[i] - offset;
        if (!(fresh > 0.0)) fresh = 0.5 * g[i];
        g.push_back(fresh);
      }
      std::sort(g.begin(), g.end());
    }
    stats.assign(g.size(), {});
    const std::size_t n = g.size();
    for (std::uint64_t t = 0; t < budget[stage]; ++t) {
      const double s = dist.sample(rng);
      std::size_t i = project(g, s).index;
      auto& c = stats[i];
      c.wins += 1.0;
      const double d = s - g[i];
      if (d < 0) {
        c.n_left += 1.0;
        c.sse_left += d * d;
      } else {
        c.n_right += 1.0;
        c.sse_right += d * d;
      }
      const double step = std::pow(c.wins + schedule.offset, -schedule.exponent);
      g[i] += step * d;
      // restore order after the move
      while (i > 0 && g[i] < g[i - 1]) {
        std::swap(g[i], g[i - 1]);
        std::swap(stats[i], stats[i - 1]);
        --i;
      }
      while (i + 1 < n && g[i] > g[i + 1]) {
        std::swap(g[i], g[i + 1]);
        std::swap(stats[i], stats[i + 1]);
        ++i;
      }
    }
    done += budget[stage];
  }
  grid.meta.iterations = done;
  grid.points = std::move(g);
  detail::dedupe_sorted(grid.points, grid.meta.warnings);
  detail::finish_grid(grid, dist, eval_samples, eval_seed);
  return grid;
}

inline QuantizationGrid clvq_train(const SojournDistribution& dist,
                                   std::size_t nu, std::uint64_t iters,
                                   std::uint64_t seed, int mode = 0) {
  return clvq_train(dist, nu, iters, ClvqSchedule{}, seed, mode);
}

/// Randomized Lloyd iterations: Monte Carlo centroid step, then repartition.
inline QuantizationGrid lloyd_refine(const SojournDistribution& dist,
                                     const QuantizationGrid& start,
                                     std::size_t iters,
                                     std::size_t samples_per_iter,
                                     std::uint64_t seed,
                                     std::size_t eval_samples = 100000) {
  if (start.points.empty()) throw std::invalid_argument("lloyd_refine: empty grid");
  if (samples_per_iter < 1)
    throw std::invalid_argument("lloyd_refine: samples_per_iter must be >= 1");
  QuantizationGrid g = start;
  g.meta.method = start.meta.method + "+lloyd";
  g.meta.seed = seed;
  g.meta.iterations += static_cast<std::uint64_t>(iters) * samples_per_iter;
  Rng rng(derive_seed(seed, 0, Stream::kTraining));
  std::vector<double> batch(samples_per_iter);
  for (std::size_t it = 0; it < iters; ++it) {
    std::vector<double> sum(g.points.size(), 0.0), cnt(g.points.size(), 0.0);
    for (auto& s : batch) {
      s = dist.sample(rng);
      const auto p = project(g.points, s);
      sum[p.index] += s;
      cnt[p.index] += 1.0;
    }
    std::uniform_int_distribution<std::size_t> pick(0, batch.size() - 1);
    for (std::size_t i = 0; i < g.points.size(); ++i) {
      if (cnt[i] > 0) {
        g.points[i] = sum[i] / cnt[i];
      } else {
        g.points[i] = batch[pick(rng)];
        g.meta.warnings.push_back("lloyd: empty cell " + std::to_string(i) +
                                  " re-seeded at iteration " +
                                  std::to_string(it));
      }
    }
    detail::dedupe_sorted(g.points, g.meta.warnings);
  }
  detail::finish_grid(g, dist, eval_samples,
                      derive_seed(seed, 0, Stream::kEvaluation));
  return g;
}

/// Codewords strictly below the horizon.
inline std::size_t used_points(const QuantizationGrid& grid, double horizon) {
  return static_cast<std::size_t>(
      std::lower_bound(grid.points.begin(), grid.points.end(), horizon) -
      grid.points.begin());
}

struct RateDiagnostic {
  std::vector<std::size_t> nus;
  std::vector<double> distortions;
  double slope = 0.0;
  double intercept = 0.0;
  bool ok = false;  // slope within -1 +/- 0.2 (scalar quantization)
};

/// Least-squares slope of log(distortion) against log(nu).
inline RateDiagnostic fit_loglog_slope(const std::vector<std::size_t>& nus,
                                       const std::vector<double>& distortions) {
  if (nus.size() < 3 || nus.size() != distortions.size())
    throw std::invalid_argument("rate diagnostic needs >= 3 matching sizes");
  RateDiagnostic r;
  r.nus = nus;
  r.distortions = distortions;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(nus.size());
  for (std::size_t i = 0; i < nus.size(); ++i) {
    const double x = std::log(static_cast<double>(nus[i]));
    const double y = std::log(distortions[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  r.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  r.intercept = (sy - r.slope * sx) / n;
  r.ok = std::abs(r.slope + 1.0) <= 0.2;
  return r;
}

inline RateDiagnostic rate_diagnostic(const SojournDistribution& dist,
                                      const std::vector<std::size_t>& nus,
                                      std::uint64_t iters, std::uint64_t seed,
                                      std::size_t eval_samples = 100000) {
  std::vector<double> d;
  for (std::size_t k = 0; k < nus.size(); ++k) {
    const auto g = clvq_train(dist, nus[k], iters, ClvqSchedule{},
                              derive_seed(seed, k, Stream::kTraining), 0,
                              eval_samples);
    d.push_back(g.distortion);
  }
  return fit_loglog_slope(nus, d);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace detail {
inline std::uint64_t json_checksum(const json& j) {
  const std::string s = j.dump();
  return fnv1a(s.data(), s.size());
}
}  // namespace detail

inline json grid_to_json(const QuantizationGrid& g) {
  json body = {{"mode", g.mode},
               {"points", g.points},
               {"weights", g.weights},
               {"distortion", g.distortion},
               {"distortion_se", g.distortion_se},
               {"train_meta",
                {{"method", g.meta.method},
                 {"iterations", g.meta.iterations},
                 {"seed", g.meta.seed},
                 {"step_exponent", g.meta.step_exponent},
                 {"step_offset", g.meta.step_offset},
                 {"final_fraction", g.meta.final_fraction},
                 {"warnings", g.meta.warnings}}}};
  json out = body;
  out["checksum"] = detail::json_checksum(body);
  return out;
}

inline QuantizationGrid grid_from_json(const json& j) {
  json body = j;
  if (!body.contains("checksum"))
    throw std::runtime_error("grid file has no checksum");
  const auto stored = body.at("checksum").get<std::uint64_t>();
  body.erase("checksum");
  if (detail::json_checksum(body) != stored)
    throw std::runtime_error("grid file checksum mismatch");
  QuantizationGrid g;
  g.mode = body.at("mode").get<int>();
  g.points = body.at("points").get<std::vector<double>>();
  g.weights = body.at("weights").get<std::vector<double>>();
  g.distortion = body.at("distortion").get<double>();
  g.distortion_se = body.at("distortion_se").get<double>();
  const auto& m = body.at("train_meta");
  g.meta.method = m.at("method").get<std::string>();
  g.meta.iterations = m.at("iterations").get<std::uint64_t>();
  g.meta.seed = m.at("seed").get<std::uint64_t>();
  g.meta.step_exponent = m.at("step_exponent").get<double>();
  g.meta.step_offset = m.at("step_offset").get<double>();
  g.meta.final_fraction = m.at("final_fraction").get<double>();
  g.meta.warnings = m.at("warnings").get<std::vector<std::string>>();
  if (!std::is_sorted(g.points.begin(), g.points.end()))
    throw std::runtime_error("grid points are not sorted");
  return g;
}

inline void save_grid(const std::string& path, const QuantizationGrid& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write grid file '" + path + "'");
  out << grid_to_json(g).dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing grid file '" + path + "'");
}

inline QuantizationGrid load_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing grid file '" + path + "'");
  return grid_from_json(json::parse(in));
}

}  // namespace qkbf
