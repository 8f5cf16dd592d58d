#pragma once

#include <qkbf/linalg.hpp>
#include <qkbf/rng.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace qkbf {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Sojourn-time laws
// ---------------------------------------------------------------------------

struct Exponential {
  double rate;
};
struct Weibull {
  double shape;
  double scale;
};
struct Uniform {
  double a;
  double b;
};
struct Empirical {
  std::vector<double> samples;  // kept sorted
};

/// Law F_i of the time spent in a mode, plus the Lipschitz constant of its CDF.
class SojournDistribution {
 public:
  using Kind = std::variant<Exponential, Weibull, Uniform, Empirical>;

  static SojournDistribution exponential(double rate) {
    return SojournDistribution(Exponential{rate}, rate);
  }
  static SojournDistribution weibull(double shape, double scale) {
    return SojournDistribution(Weibull{shape, scale},
                               weibull_lipschitz(shape, scale));
  }
  static SojournDistribution uniform(double a, double b) {
    return SojournDistribution(Uniform{a, b},
                               b > a ? 1.0 / (b - a)
                                     : std::numeric_limits<double>::infinity());
  }
  /// Empirical laws carry a user-supplied Lipschitz constant.
  static SojournDistribution empirical(std::vector<double> samples,
                                       double lipschitz) {
    std::sort(samples.begin(), samples.end());
    return SojournDistribution(Empirical{std::move(samples)}, lipschitz);
  }

  const Kind& kind() const { return kind_; }
  double lipschitz() const { return lipschitz_; }

  std::string name() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, Exponential>) return "exponential";
          else if constexpr (std::is_same_v<K, Weibull>) return "weibull";
          else if constexpr (std::is_same_v<K, Uniform>) return "uniform";
          else return "empirical";
        },
        kind_);
  }

  double sample(Rng& rng) const {
    return std::visit(
        [&rng](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, Exponential>) {
            return std::exponential_distribution<double>(k.rate)(rng);
          } else if constexpr (std::is_same_v<K, Weibull>) {
            return std::weibull_distribution<double>(k.shape, k.scale)(rng);
          } else if constexpr (std::is_same_v<K, Uniform>) {
            return std::uniform_real_distribution<double>(k.a, k.b)(rng);
          } else {
            std::uniform_int_distribution<std::size_t> pick(
                0, k.samples.size() - 1);
            return k.samples[pick(rng)];
          }
        },
        kind_);
  }

  double cdf(double x) const {
    if (x < 0.0) return 0.0;
    return std::visit(
        [x](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, Exponential>) {
            return -std::expm1(-k.rate * x);
          } else if constexpr (std::is_same_v<K, Weibull>) {
            return -std::expm1(-std::pow(x / k.scale, k.shape));
          } else if constexpr (std::is_same_v<K, Uniform>) {
            if (x <= k.a) return 0.0;
            if (x >= k.b) return 1.0;
            return (x - k.a) / (k.b - k.a);
          } else {
            const auto it =
                std::upper_bound(k.samples.begin(), k.samples.end(), x);
            return static_cast<double>(it - k.samples.begin()) /
                   static_cast<double>(k.samples.size());
          }
        },
        kind_);
  }

  double mean() const {
    return std::visit(
        [](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, Exponential>) {
            return 1.0 / k.rate;
          } else if constexpr (std::is_same_v<K, Weibull>) {
            return k.scale * std::tgamma(1.0 + 1.0 / k.shape);
          } else if constexpr (std::is_same_v<K, Uniform>) {
            return 0.5 * (k.a + k.b);
          } else {
            double s = 0.0;
            for (double v : k.samples) s += v;
            return s / static_cast<double>(k.samples.size());
          }
        },
        kind_);
  }

  double variance() const {
    return std::visit(
        [](const auto& k) -> double {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, Exponential>) {
            return 1.0 / (k.rate * k.rate);
          } else if constexpr (std::is_same_v<K, Weibull>) {
            const double g1 = std::tgamma(1.0 + 1.0 / k.shape);
            const double g2 = std::tgamma(1.0 + 2.0 / k.shape);
            return k.scale * k.scale * (g2 - g1 * g1);
          } else if constexpr (std::is_same_v<K, Uniform>) {
            return (k.b - k.a) * (k.b - k.a) / 12.0;
          } else {
            double m = 0.0, m2 = 0.0;
            for (double v : k.samples) m += v;
            m /= static_cast<double>(k.samples.size());
            for (double v : k.samples) m2 += (v - m) * (v - m);
            return m2 / static_cast<double>(k.samples.size());
          }
        },
        kind_);
  }

  /// Empty when the parameters describe a proper law on (0, inf).
  std::optional<std::string> parameter_error() const {
    return std::visit(
        [](const auto& k) -> std::optional<std::string> {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, Exponential>) {
            if (!(k.rate > 0.0) || !std::isfinite(k.rate))
              return "exponential rate must be positive and finite";
          } else if constexpr (std::is_same_v<K, Weibull>) {
            if (!(k.shape > 0.0) || !(k.scale > 0.0))
              return "weibull shape and scale must be positive";
          } else if constexpr (std::is_same_v<K, Uniform>) {
            if (!(k.a >= 0.0) || !(k.b > k.a))
              return "uniform support must satisfy 0 <= a < b";
          } else {
            if (k.samples.empty()) return "empirical law has no samples";
            if (!(k.samples.front() > 0.0))
              return "empirical samples must be positive";
          }
          return std::nullopt;
        },
        kind_);
  }

 private:
  SojournDistribution(Kind k, double lipschitz)
      : kind_(std::move(k)), lipschitz_(lipschitz) {}

  // sup of the Weibull density; unbounded at 0 when shape < 1.
  static double weibull_lipschitz(double shape, double scale) {
    if (shape < 1.0) return std::numeric_limits<double>::infinity();
    if (shape == 1.0) return 1.0 / scale;
    const double r = (shape - 1.0) / shape;
    return shape / scale * std::pow(r, r) * std::exp(-r);
  }

  Kind kind_;
  double lipschitz_;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Matrices of one mode: dx = A x dt + E dw, dy = C x dt + D dv.
struct Mode {
  Matrix A;  // n1 x n1
  Matrix C;  // n2 x n1
  Matrix D;  // n2 x n4
  Matrix E;  // n1 x n3
};

struct SMJLSModel {
  std::vector<Mode> modes;
  Eigen::MatrixXd embedded;  // post-jump kernel of the jump chain
  std::vector<SojournDistribution> sojourns;
  Eigen::VectorXd init_mode_dist;
  Vector x0_mean;
  Matrix x0_cov;

  std::size_t n_modes() const { return modes.size(); }
  Eigen::Index n1() const { return modes.empty() ? 0 : modes[0].A.rows(); }
  Eigen::Index n2() const { return modes.empty() ? 0 : modes[0].C.rows(); }
  Eigen::Index n3() const { return modes.empty() ? 0 : modes[0].E.cols(); }
  Eigen::Index n4() const { return modes.empty() ? 0 : modes[0].D.cols(); }

  double lambda_bar() const {
    double l = 0.0;
    for (const auto& s : sojourns) l = std::max(l, s.lipschitz());
    return l;
  }

  bool is_markov() const {
    return std::all_of(sojourns.begin(), sojourns.end(), [](const auto& s) {
      return std::holds_alternative<Exponential>(s.kind());
    });
  }
};

/// Symmetrizes x0_cov and floors its eigenvalues at zero.
inline SMJLSModel normalized(SMJLSModel m) {
  if (m.x0_cov.rows() == m.x0_cov.cols() && m.x0_cov.size() > 0)
    m.x0_cov = psd_floor(m.x0_cov);
  return m;
}

struct Violation {
  int mode;  // -1 when not tied to a mode
  std::string message;
  double magnitude;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  std::string to_string() const {
    std::ostringstream os;
    for (const auto& v : violations) {
      os << v.message;
      if (v.mode >= 0) os << ", mode " << v.mode + 1;
      os << " (magnitude " << v.magnitude << ")\n";
    }
    return os.str();
  }
};

inline ValidationReport validate(const SMJLSModel& m) {
  ValidationReport rep;
  auto add = [&rep](int mode, std::string msg, double mag) {
    rep.violations.push_back({mode, std::move(msg), mag});
  };
  const auto n = static_cast<Eigen::Index>(m.n_modes());
  if (n == 0) {
    add(-1, "model has no modes", 0.0);
    return rep;
  }
  const auto n1 = m.n1(), n2 = m.n2(), n3 = m.n3(), n4 = m.n4();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& md = m.modes[i];
    const int im = static_cast<int>(i);
    if (md.A.rows() != n1 || md.A.cols() != n1)
      add(im, "A is not n1 x n1", static_cast<double>(md.A.rows()));
    if (md.C.rows() != n2 || md.C.cols() != n1)
      add(im, "C is not n2 x n1", static_cast<double>(md.C.rows()));
    if (md.D.rows() != n2 || md.D.cols() != n4)
      add(im, "D is not n2 x n4", static_cast<double>(md.D.rows()));
    if (md.E.rows() != n1 || md.E.cols() != n3)
      add(im, "E is not n1 x n3", static_cast<double>(md.E.rows()));
    if (!md.A.allFinite() || !md.C.allFinite() || !md.D.allFinite() ||
        !md.E.allFinite())
      add(im, "non-finite matrix entry", 0.0);
    if (md.D.rows() == n2 && md.D.cols() == n4 && n2 > 0) {
      const Matrix ddt = md.D * md.D.transpose();
      const double lmin = min_eigenvalue(ddt);
      const double scale = std::max(1.0, ddt.cwiseAbs().maxCoeff());
      if (!(lmin > 1e-12 * scale)) add(im, "DD' singular", lmin);
    }
  }
  if (m.embedded.rows() != n || m.embedded.cols() != n) {
    add(-1, "embedded kernel is not N x N",
        static_cast<double>(m.embedded.rows()));
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      const int im = static_cast<int>(i);
      if (m.embedded(i, i) != 0.0)
        add(im, "embedded diagonal is nonzero", m.embedded(i, i));
      if (m.embedded.row(i).minCoeff() < 0.0)
        add(im, "embedded row has a negative entry",
            m.embedded.row(i).minCoeff());
      const double rs = m.embedded.row(i).sum();
      const bool single_mode_absorbing = n == 1 && rs == 0.0;
      if (!single_mode_absorbing && std::abs(rs - 1.0) > 1e-12) {
        std::ostringstream os;
        os << "row sum " << rs << " != 1";
        add(im, os.str(), rs);
      }
    }
  }
  if (static_cast<Eigen::Index>(m.sojourns.size()) != n) {
    add(-1, "one sojourn law per mode required",
        static_cast<double>(m.sojourns.size()));
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& s = m.sojourns[i];
      if (auto e = s.parameter_error())
        add(static_cast<int>(i), *e, 0.0);
      if (!(s.lipschitz() >= 0.0) || !std::isfinite(s.lipschitz()))
        add(static_cast<int>(i), "sojourn CDF is not Lipschitz",
            s.lipschitz());
    }
  }
  if (m.init_mode_dist.size() != n) {
    add(-1, "initial mode distribution has wrong length",
        static_cast<double>(m.init_mode_dist.size()));
  } else {
    if (m.init_mode_dist.minCoeff() < 0.0)
      add(-1, "initial mode distribution has a negative entry",
          m.init_mode_dist.minCoeff());
    if (std::abs(m.init_mode_dist.sum() - 1.0) > 1e-12)
      add(-1, "initial mode distribution does not sum to 1",
          m.init_mode_dist.sum());
  }
  if (m.x0_mean.size() != n1)
    add(-1, "x0_mean has wrong length", static_cast<double>(m.x0_mean.size()));
  if (m.x0_cov.rows() != n1 || m.x0_cov.cols() != n1) {
    add(-1, "x0_cov is not n1 x n1", static_cast<double>(m.x0_cov.rows()));
  } else {
    const double asym = (m.x0_cov - m.x0_cov.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * std::max(1.0, m.x0_cov.cwiseAbs().maxCoeff()))
      add(-1, "x0_cov not symmetric", asym);
    const double lmin = min_eigenvalue(m.x0_cov);
    if (lmin < -1e-12) add(-1, "x0_cov not positive semidefinite", lmin);
  }
  return rep;
}

inline void require_valid(const SMJLSModel& m) {
  const auto rep = validate(m);
  if (!rep.ok())
    throw std::invalid_argument("invalid model:\n" + rep.to_string());
}

/// Builds a Markov jump model from a transition-rate generator.
inline SMJLSModel from_rate_matrix(std::vector<Mode> modes,
                                   const Eigen::MatrixXd& generator,
                                   Eigen::VectorXd pi0, Vector x0_mean,
                                   Matrix x0_cov) {
  const auto n = generator.rows();
  if (generator.cols() != n || static_cast<Eigen::Index>(modes.size()) != n)
    throw std::invalid_argument("generator size does not match mode count");
  SMJLSModel m;
  m.modes = std::move(modes);
  m.embedded = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double out = -generator(i, i);
    if (!(out > 0.0))
      throw std::invalid_argument(
          "generator diagonal must be strictly negative (absorbing mode " +
          std::to_string(i + 1) + ")");
    double row = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      row += generator(i, j);
      if (j == i) continue;
      if (generator(i, j) < 0.0)
        throw std::invalid_argument("negative off-diagonal rate");
      m.embedded(i, j) = generator(i, j) / out;
    }
    if (std::abs(row) > 1e-9 * out)
      throw std::invalid_argument("generator rows must sum to zero");
    m.sojourns.push_back(SojournDistribution::exponential(out));
  }
  m.init_mode_dist = std::move(pi0);
  m.x0_mean = std::move(x0_mean);
  m.x0_cov = std::move(x0_cov);
  return normalized(std::move(m));
}

/// Transition-rate generator of a model whose sojourns are all exponential.
inline std::optional<Eigen::MatrixXd> generator_matrix(const SMJLSModel& m) {
  if (!m.is_markov()) return std::nullopt;
  const auto n = static_cast<Eigen::Index>(m.n_modes());
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double rate = std::get<Exponential>(m.sojourns[i].kind()).rate;
    if (m.embedded.row(i).sum() == 0.0) continue;  // single absorbing mode
    for (Eigen::Index j = 0; j < n; ++j)
      g(i, j) = j == i ? -rate : rate * m.embedded(i, j);
  }
  return g;
}

/// Magnetic suspension benchmark: normal mode 1 (closed loop), failure mode 2.
inline SMJLSModel maglev_preset() {
  Matrix a1(3, 3), a2(3, 3), c(2, 3), d(2, 2), e(3, 3);
  a1 << 0, 1, 0,          //
      1750, 0, -34.1,     //
      4360.2, 104.2, -84.3;
  a2 << 0, 1, 0,      //
      1750, 0, -34.1,  //
      0, 0, -0.0383;
  c << 1, 0, 0,  //
      0, 0, 1;
  d << 1, 0,  //
      0, 1;
  e << 1, 0.2, -1.9,   //
      -0.1, 1.4, -0.3,  //
      0.1, 0.5, 1;
  Eigen::MatrixXd gen(2, 2);
  gen << -20, 20,  //
      0.1, -0.1;
  Eigen::VectorXd pi0(2);
  pi0 << 0.999, 0.001;
  Vector x0(3);
  x0 << 0.001, 0, 0;
  return from_rate_matrix({{a1, c, d, e}, {a2, c, d, e}}, gen, pi0, x0,
                          Matrix::Identity(3, 3));
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const json& j,
                                std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object())
    throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }))
      throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

inline Matrix matrix_from_json(const json& j, const std::string& what) {
  try {
    return matrix_from_rows(j.get<std::vector<std::vector<double>>>());
  } catch (const json::exception& e) {
    throw std::invalid_argument(what + ": " + e.what());
  }
}

inline Eigen::MatrixXd dyn_matrix_from_json(const json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  Eigen::MatrixXd m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != static_cast<std::size_t>(m.cols()))
      throw std::invalid_argument("ragged matrix rows");
    for (std::size_t k = 0; k < rows[i].size(); ++k) m(i, k) = rows[i][k];
  }
  return m;
}

inline json dyn_matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) r.push_back(m(i, k));
    rows.push_back(r);
  }
  return rows;
}

}  // namespace detail

inline SojournDistribution sojourn_from_json(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "exponential") {
    detail::reject_unknown_keys(j, {"kind", "rate"}, "sojourn");
    return SojournDistribution::exponential(j.at("rate").get<double>());
  }
  if (kind == "weibull") {
    detail::reject_unknown_keys(j, {"kind", "shape", "scale"}, "sojourn");
    return SojournDistribution::weibull(j.at("shape").get<double>(),
                                        j.at("scale").get<double>());
  }
  if (kind == "uniform") {
    detail::reject_unknown_keys(j, {"kind", "a", "b"}, "sojourn");
    return SojournDistribution::uniform(j.at("a").get<double>(),
                                        j.at("b").get<double>());
  }
  if (kind == "empirical") {
    detail::reject_unknown_keys(j, {"kind", "samples", "lipschitz"},
                                "sojourn");
    return SojournDistribution::empirical(
        j.at("samples").get<std::vector<double>>(),
        j.at("lipschitz").get<double>());
  }
  throw std::invalid_argument("unknown sojourn kind '" + kind + "'");
}

inline json sojourn_to_json(const SojournDistribution& s) {
  return std::visit(
      [&s](const auto& k) -> json {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Exponential>)
          return {{"kind", "exponential"}, {"rate", k.rate}};
        else if constexpr (std::is_same_v<K, Weibull>)
          return {{"kind", "weibull"}, {"shape", k.shape}, {"scale", k.scale}};
        else if constexpr (std::is_same_v<K, Uniform>)
          return {{"kind", "uniform"}, {"a", k.a}, {"b", k.b}};
        else
          return {{"kind", "empirical"},
                  {"samples", k.samples},
                  {"lipschitz", s.lipschitz()}};
      },
      s.kind());
}

/// Parses a model object. Either "embedded" + "sojourns" or "generator".
inline SMJLSModel model_from_json(const json& j) {
  detail::reject_unknown_keys(j,
                              {"name", "modes", "embedded", "sojourns",
                               "generator", "init_mode_dist", "x0_mean",
                               "x0_cov"},
                              "model");
  std::vector<Mode> modes;
  for (const auto& jm : j.at("modes")) {
    detail::reject_unknown_keys(jm, {"A", "C", "D", "E"}, "mode");
    modes.push_back({detail::matrix_from_json(jm.at("A"), "A"),
                     detail::matrix_from_json(jm.at("C"), "C"),
                     detail::matrix_from_json(jm.at("D"), "D"),
                     detail::matrix_from_json(jm.at("E"), "E")});
  }
  const auto pi0v = j.at("init_mode_dist").get<std::vector<double>>();
  Eigen::VectorXd pi0 =
      Eigen::Map<const Eigen::VectorXd>(pi0v.data(), pi0v.size());
  const auto meanv = j.at("x0_mean").get<std::vector<double>>();
  if (meanv.size() > static_cast<std::size_t>(kMaxDim))
    throw std::invalid_argument("x0_mean exceeds the maximum dimension");
  Vector x0(static_cast<Eigen::Index>(meanv.size()));
  for (std::size_t i = 0; i < meanv.size(); ++i) x0(i) = meanv[i];
  Matrix cov = detail::matrix_from_json(j.at("x0_cov"), "x0_cov");

  if (j.contains("generator")) {
    if (j.contains("embedded") || j.contains("sojourns"))
      throw std::invalid_argument(
          "model: give either 'generator' or 'embedded'+'sojourns'");
    return from_rate_matrix(std::move(modes),
                            detail::dyn_matrix_from_json(j.at("generator")),
                            std::move(pi0), std::move(x0), std::move(cov));
  }
  SMJLSModel m;
  m.modes = std::move(modes);
  m.embedded = detail::dyn_matrix_from_json(j.at("embedded"));
  for (const auto& js : j.at("sojourns"))
    m.sojourns.push_back(sojourn_from_json(js));
  m.init_mode_dist = std::move(pi0);
  m.x0_mean = std::move(x0);
  m.x0_cov = std::move(cov);
  return normalized(std::move(m));
}

inline json model_to_json(const SMJLSModel& m) {
  json modes = json::array();
  for (const auto& md : m.modes)
    modes.push_back({{"A", matrix_to_rows(md.A)},
                     {"C", matrix_to_rows(md.C)},
                     {"D", matrix_to_rows(md.D)},
                     {"E", matrix_to_rows(md.E)}});
  json soj = json::array();
  for (const auto& s : m.sojourns) soj.push_back(sojourn_to_json(s));
  std::vector<double> pi0(m.init_mode_dist.data(),
                          m.init_mode_dist.data() + m.init_mode_dist.size());
  std::vector<double> mean(m.x0_mean.data(),
                           m.x0_mean.data() + m.x0_mean.size());
  return {{"modes", modes},
          {"embedded", detail::dyn_matrix_to_json(m.embedded)},
          {"sojourns", soj},
          {"init_mode_dist", pi0},
          {"x0_mean", mean},
          {"x0_cov", matrix_to_rows(m.x0_cov)}};
}

inline std::uint64_t model_hash(const SMJLSModel& m) {
  const std::string s = model_to_json(m).dump();
  return fnv1a(s.data(), s.size());
}

inline SMJLSModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model file '" + path + "'");
  return model_from_json(json::parse(in));
}

}  // namespace qkbf
