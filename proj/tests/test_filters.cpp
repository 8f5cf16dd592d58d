#include <qkbf/filters.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"

using namespace qkbf;

namespace {

constexpr double kDt = 1e-4;
constexpr double kOde = 1e-5;

QuantizationGrid grid_of(std::vector<double> pts, int mode) {
  QuantizationGrid g;
  g.mode = mode;
  g.points = std::move(pts);
  g.weights.assign(g.points.size(), 1.0 / g.points.size());
  return g;
}

Trajectory make_traj(std::vector<int> z, std::vector<double> t, double T) {
  Trajectory tr;
  tr.z = std::move(z);
  tr.t_jump = std::move(t);
  tr.s.push_back(0.0);
  for (std::size_t k = 1; k < tr.t_jump.size(); ++k)
    tr.s.push_back(tr.t_jump[k] - tr.t_jump[k - 1]);
  tr.horizon = T;
  tr.n_max = 100;
  return tr;
}

TruthPath maglev_truth(const SMJLSModel& m, const Trajectory& tr, double T,
                       std::uint64_t seed) {
  Rng rng(seed);
  const Vector x0 = draw_initial_state(m, rng);
  return simulate_truth(m, tr, make_noise(m, T, kDt, seed + 1), kDt, x0);
}

}  // namespace

TEST(Noise, IncrementMoments) {
  const auto m = maglev_preset();
  const auto n = make_noise(m, 1.0, 1e-4, 99);
  ASSERT_EQ(n.ticks(), 10000u);
  for (const Eigen::MatrixXd* w : {&n.dw, &n.dv}) {
    const double N = static_cast<double>(w->size());
    const double mean = w->sum() / N;
    const double var = w->array().square().sum() / N;
    EXPECT_NEAR(mean, 0.0, 4 * std::sqrt(1e-4 / N));
    EXPECT_NEAR(var, 1e-4, 4 * 1e-4 * std::sqrt(2.0 / N));
  }
}

TEST(Noise, InitialStateMean) {
  const auto m = maglev_preset();
  Rng rng(4);
  Vector sum = Vector::Zero(3);
  const int n = 10000;
  for (int i = 0; i < n; ++i) sum += draw_initial_state(m, rng);
  const Vector mean = sum / n;
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(mean(i), m.x0_mean(i), 3.0 / std::sqrt(n));
}

TEST(Truth, DegenerateSdeIsConstant) {
  Matrix z = Matrix::Zero(2, 2);
  Matrix c(1, 2);
  c << 1, 2;
  const auto m = fixtures::single_mode({z, c, Matrix::Zero(1, 1), z}, z);
  const auto tr = make_traj({0, 0}, {0.0, INFINITY}, 0.01);
  const auto noise = make_noise(m, 0.01, 1e-3, 1);
  Vector x0(2);
  x0 << 1.0, -3.0;
  const auto t = simulate_truth(m, tr, noise, 1e-3, x0);
  for (Eigen::Index j = 0; j < t.x.cols(); ++j) EXPECT_EQ(Vector(t.x.col(j)), x0);
  for (Eigen::Index j = 0; j < t.dy.cols(); ++j)
    EXPECT_NEAR(t.dy(0, j), -5.0 * 1e-3, 1e-15);
}

TEST(Truth, DecayMatchesClosedForm) {
  Matrix one = Matrix::Ones(1, 1);
  const auto m = fixtures::single_mode({-one, one, one, 0.0 * one}, one);
  const auto tr = make_traj({0, 0}, {0.0, INFINITY}, 1.0);
  const auto t = simulate_truth(m, tr, make_noise(m, 1.0, 1e-3, 1), 1e-3,
                                Vector::Ones(1));
  EXPECT_NEAR(t.x(0, 1000), std::exp(-1.0), 1e-3);
}

TEST(Truth, DivergenceReported) {
  Matrix one = Matrix::Ones(1, 1);
  const auto m = fixtures::single_mode({1e6 * one, one, one, 0.0 * one}, one);
  const auto tr = make_traj({0, 0}, {0.0, INFINITY}, 1.0);
  EXPECT_THROW(simulate_truth(m, tr, make_noise(m, 1.0, 1e-2, 1), 1e-2,
                              Vector::Ones(1)),
               DivergenceError);
}

TEST(Gain, Formula) {
  const auto mg = maglev_preset().modes[0];
  EXPECT_EQ(kbf_gain(Matrix::Zero(3, 3), mg), Matrix::Zero(3, 2));
  EXPECT_EQ(kbf_gain(Matrix::Identity(3, 3), mg), Matrix(mg.C.transpose()));
  Matrix one = Matrix::Identity(2, 2);
  Matrix p(2, 2);
  p << 2, 1, 1, 3;
  EXPECT_EQ(kbf_gain(p, {one, one, one, one}), p);
}

TEST(Kbf, NoiseFreeTracksExactly) {
  auto m = maglev_preset();
  for (auto& md : m.modes) md.E.setZero();
  m.x0_cov.setZero();
  const auto tr = make_traj({0, 1, 0}, {0.0, 0.0123, 0.9}, 0.02);
  NoiseRealization noise{kDt, Eigen::MatrixXd::Zero(3, 200),
                         Eigen::MatrixXd::Zero(2, 200), 0};
  const auto truth = simulate_truth(m, tr, noise, kDt, m.x0_mean);
  const auto run = run_kbf(m, tr, truth, kOde);
  EXPECT_LT((run.x_hat - truth.x).norm(), 1e-12);
  for (const auto& p : run.P) EXPECT_EQ(p, Matrix::Zero(3, 3));
}

TEST(Kbf, ConvergesToAlgebraicFixedPoint) {
  Matrix one = Matrix::Ones(1, 1);
  const Mode md{-one, one, one, one};
  const auto m = fixtures::single_mode(md, 5.0 * one);
  const auto tr = make_traj({0, 0}, {0.0, INFINITY}, 10.0);
  const auto truth = simulate_truth(m, tr, make_noise(m, 10.0, 1e-2, 3), 1e-2,
                                    Vector::Zero(1));
  const auto run = run_kbf(m, tr, truth, 1e-3);
  EXPECT_NEAR(run.P.back()(0, 0), std::sqrt(2.0) - 1.0, 1e-9);
  EXPECT_LT(riccati_rhs(run.P.back(), md).norm(), 1e-8);
}

TEST(Quantized, JumpFreeRunIsTheRootBranch) {
  const auto m = maglev_preset();
  std::vector<QuantizationGrid> grids{grid_of({0.004, 0.011}, 0),
                                      grid_of({0.5}, 1)};
  const auto tree =
      build_branch_tree(m, grids, {0.02, 8, kDt, kOde, 10000, 1});
  const auto tr = make_traj({0, 1}, {0.0, 0.7}, 0.02);
  const auto truth = maglev_truth(m, tr, 0.02, 5);
  const auto kb = run_kbf(m, tr, truth, kOde);
  const auto q = run_quantized(m, tree, tr, truth);
  ASSERT_EQ(kb.P.size(), q.P.size());
  for (std::size_t j = 0; j < kb.P.size(); ++j) EXPECT_EQ(kb.P[j], q.P[j]);
  EXPECT_EQ(kb.x_hat, q.x_hat);
  EXPECT_TRUE(q.selection.empty());
  EXPECT_FALSE(q.censored);
}

TEST(Quantized, JumpAtCodewordTickMatchesRestart) {
  const auto m = maglev_preset();
  const double s = 50 * kDt;
  std::vector<QuantizationGrid> grids{grid_of({s, 0.013}, 0), grid_of({0.5}, 1)};
  const auto tree =
      build_branch_tree(m, grids, {0.02, 8, kDt, kOde, 10000, 1});
  const auto tr = make_traj({0, 1, 0}, {0.0, s - 1e-13, 0.9}, 0.02);
  const auto truth = maglev_truth(m, tr, 0.02, 6);
  const auto kb = run_kbf(m, tr, truth, kOde);
  const auto q = run_quantized(m, tree, tr, truth);
  ASSERT_EQ(q.selection.size(), 1u);
  EXPECT_DOUBLE_EQ(q.selection[0].t_effective, s);
  EXPECT_DOUBLE_EQ(q.selection[0].s_hat, s);
  EXPECT_FALSE(q.selection[0].fallback);
  for (std::size_t j = 0; j < kb.P.size(); ++j)
    EXPECT_LE(sym_norm2(kb.P[j] - q.P[j]), 1e-8 * sym_norm2(kb.P[j])) << j;
}

TEST(Quantized, JumpOnTickMovesToNextTick) {
  const auto m = maglev_preset();
  std::vector<QuantizationGrid> grids{grid_of({0.003, 0.013}, 0),
                                      grid_of({0.5}, 1)};
  const auto tree =
      build_branch_tree(m, grids, {0.02, 8, kDt, kOde, 10000, 1});
  const double t1 = 30 * kDt;
  const auto tr = make_traj({0, 1, 0}, {0.0, t1, 0.9}, 0.02);
  const auto q = run_quantized(m, tree, tr, maglev_truth(m, tr, 0.02, 7));
  ASSERT_EQ(q.selection.size(), 1u);
  EXPECT_DOUBLE_EQ(q.selection[0].t_effective, 31 * kDt);
  EXPECT_EQ(effective_tick(t1, kDt), 31u);
  EXPECT_EQ(effective_tick(t1 - 1e-12, kDt), 30u);
}

TEST(Quantized, ObservationDelayShiftsSelection) {
  const auto m = maglev_preset();
  std::vector<QuantizationGrid> grids{grid_of({0.003, 0.013}, 0),
                                      grid_of({0.5}, 1)};
  const auto tree =
      build_branch_tree(m, grids, {0.02, 8, kDt, kOde, 10000, 1});
  const auto tr = make_traj({0, 1, 0}, {0.0, 0.00305, 0.9}, 0.02);
  const auto truth = maglev_truth(m, tr, 0.02, 8);
  const auto q = run_quantized(m, tree, tr, truth, {0.001, false});
  ASSERT_EQ(q.selection.size(), 1u);
  EXPECT_DOUBLE_EQ(q.selection[0].t_effective, 41 * kDt);
  const auto raw = run_quantized(m, tree, tr, truth, {0.0, true});
  EXPECT_DOUBLE_EQ(raw.selection[0].s_hat, 0.003);
}

TEST(Quantized, CensoredWhenDepthExhausted) {
  const auto m = maglev_preset();
  std::vector<QuantizationGrid> grids{grid_of({0.003, 0.013}, 0),
                                      grid_of({0.004}, 1)};
  const auto tree = build_branch_tree(m, grids, {0.02, 1, kDt, kOde, 10000, 1});
  const auto tr = make_traj({0, 1, 0, 1}, {0.0, 0.003, 0.007, 0.9}, 0.02);
  const auto q = run_quantized(m, tree, tr, maglev_truth(m, tr, 0.02, 9));
  EXPECT_TRUE(q.censored);
  ASSERT_EQ(q.selection.size(), 2u);
  EXPECT_EQ(q.selection[1].node, q.selection[0].node);
  EXPECT_DOUBLE_EQ(tr.restriction_end(1), 0.007);
}

TEST(Quantized, MissingChildFallsBackWithWarning) {
  const auto m = maglev_preset();
  std::vector<QuantizationGrid> grids{grid_of({0.003, 0.013}, 0),
                                      grid_of({0.5}, 1)};
  const auto tree =
      build_branch_tree(m, grids, {0.02, 8, kDt, kOde, 10000, 1});
  // the mode-2 branch starting at 0.003 has no children inside the horizon
  const auto tr = make_traj({0, 1, 0, 1}, {0.0, 0.003, 0.01, 0.9}, 0.02);
  const auto q = run_quantized(m, tree, tr, maglev_truth(m, tr, 0.02, 10));
  ASSERT_EQ(q.selection.size(), 2u);
  EXPECT_TRUE(q.selection[1].fallback);
  EXPECT_EQ(q.warnings, 1);
  EXPECT_FALSE(q.censored);
}

TEST(Quantized, GainsBoundedByTree) {
  const auto m = maglev_preset();
  std::vector<QuantizationGrid> grids{grid_of({0.002, 0.006, 0.012}, 0),
                                      grid_of({0.5}, 1)};
  const auto tree =
      build_branch_tree(m, grids, {0.02, 8, kDt, kOde, 10000, 1});
  const double pbar = tree_pbar_norm(tree);
  const auto& md = m.modes[0];
  const double cnorm =
      norm2(md.C.transpose() * (md.D * md.D.transpose()).inverse());
  for (std::uint64_t r = 0; r < 20; ++r) {
    const auto tr = sample_trajectory(m, 0.02, 1000, r);
    const auto q = run_quantized(m, tree, tr, maglev_truth(m, tr, 0.02, r));
    for (double k : q.gain_norm) {
      EXPECT_TRUE(std::isfinite(k));
      EXPECT_LE(k, pbar * cnorm * (1 + 1e-12));
    }
  }
}

TEST(Quantized, SelectionCsv) {
  FilterRun run;
  run.selection.push_back({1, 0.00305, 0.0031, 0.0031, 0.003, 4, false});
  std::ostringstream os;
  write_selection_csv(os, run);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "k,T_k,T_eff_k,S_eff_k,S_hat_k,node_id,fallback");
}

TEST(MarkovPi, ZeroGeneratorIsConstant) {
  Eigen::VectorXd pi0(2);
  pi0 << 0.3, 0.7;
  const auto aux = markov_pi(Eigen::MatrixXd::Zero(2, 2), pi0, 0.1, 1.0);
  for (const auto& p : aux.pi_path) EXPECT_LT((p - pi0).norm(), 1e-15);
}

TEST(MarkovPi, ApproachesStationaryLaw) {
  const auto m = maglev_preset();
  const auto aux = markov_pi(m, 1.0, 200.0);
  for (const auto& p : aux.pi_path) {
    EXPECT_NEAR(p.sum(), 1.0, 1e-10);
    EXPECT_GE(p.minCoeff(), 0.0);
  }
  // stationary law solves pi Lambda = 0: 20 pi_1 = 0.1 pi_2
  EXPECT_NEAR(aux.pi_path.back()(0), 1.0 / 201.0, 1e-9);
  EXPECT_NEAR(aux.pi_path.back()(1), 200.0 / 201.0, 1e-9);
}

TEST(Lmmse, InitialCovarianceSplitsByMode) {
  const auto m = maglev_preset();
  const auto sol = solve_lmmse(m, markov_pi(m, kDt, 0.02), 0.02, kOde);
  Matrix sum = Matrix::Zero(3, 3);
  for (const auto& p : sol.P[0]) sum += p;
  EXPECT_LT((sum - m.x0_cov).norm(), 1e-15);
  EXPECT_TRUE(sol.finite);
}

TEST(Lmmse, SingleModeReducesToKbf) {
  Matrix one = Matrix::Ones(1, 1);
  auto m = fixtures::single_mode({-one, one, one, one}, 2.0 * one);
  const auto tr = make_traj({0, 0}, {0.0, INFINITY}, 1.0);
  const auto truth =
      simulate_truth(m, tr, make_noise(m, 1.0, 1e-2, 3), 1e-2, Vector::Zero(1));
  const auto kb = run_kbf(m, tr, truth, 1e-3);
  const auto sol = solve_lmmse(m, markov_pi(m, 1e-2, 1.0), 1.0, 1e-3);
  const auto l = run_lmmse(m, sol, truth);
  for (std::size_t j = 0; j < kb.P.size(); ++j)
    EXPECT_NEAR(kb.P[j](0, 0), l.P[j](0, 0), 1e-12);
  EXPECT_LT((kb.x_hat - l.x_hat).norm(), 1e-10);
}

TEST(Lmmse, VanishingProbabilityFails) {
  auto m = maglev_preset();
  m.init_mode_dist << 1.0, 0.0;
  EXPECT_THROW(solve_lmmse(m, markov_pi(m, kDt, 0.02), 0.02, kOde),
               std::domain_error);
}

TEST(Lmmse, NeedsMarkovModel) {
  auto m = maglev_preset();
  m.sojourns[0] = SojournDistribution::weibull(2.0, 0.05);
  EXPECT_THROW(markov_pi(m, kDt, 0.02), std::invalid_argument);
}

TEST(RunCsv, HeaderAndRows) {
  const auto m = maglev_preset();
  const auto tr = make_traj({0, 1}, {0.0, 0.5}, 0.001);
  Rng rng(1);
  const auto truth = simulate_truth(m, tr, make_noise(m, 0.001, kDt, 2), kDt,
                                    draw_initial_state(m, rng));
  const auto kb = run_kbf(m, tr, truth, kOde);
  std::ostringstream os;
  write_run_csv(os, truth, kb);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "t,x1,x2,x3,xhat1,xhat2,xhat3,P_norm,K_norm");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 11);
}
