#pragma once

#include <qkbf/model.hpp>

namespace qkbf::fixtures {

inline Mode make_mode(const Matrix& a, const Matrix& c, const Matrix& d,
                      const Matrix& e) {
  return Mode{a, c, d, e};
}

/// One mode, never jumps.
inline SMJLSModel single_mode(const Mode& m, const Matrix& x0_cov) {
  SMJLSModel s;
  s.modes = {m};
  s.embedded = Eigen::MatrixXd::Zero(1, 1);
  s.sojourns = {SojournDistribution::exponential(1.0)};
  s.init_mode_dist = Eigen::VectorXd::Ones(1);
  s.x0_mean = Vector::Zero(m.A.rows());
  s.x0_cov = x0_cov;
  return s;
}

/// Scalar model A = -a, C = D = E = 1 with two modes alternating.
inline SMJLSModel scalar_pair(double a1, double a2, double rate1,
                              double rate2) {
  Matrix one = Matrix::Ones(1, 1);
  Mode m1{-a1 * one, one, one, one};
  Mode m2{-a2 * one, one, one, one};
  Eigen::MatrixXd gen(2, 2);
  gen << -rate1, rate1, rate2, -rate2;
  Eigen::VectorXd pi0(2);
  pi0 << 1.0, 0.0;
  return from_rate_matrix({m1, m2}, gen, pi0, Vector::Zero(1), one);
}

inline Matrix random_psd(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g;
  Matrix b(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) b(i, j) = g(rng);
  Matrix p = b * b.transpose() * (scale / n);
  return 0.5 * (p + p.transpose());
}

}  // namespace qkbf::fixtures
