#include <qkbf/quantizer.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace qkbf;

namespace {

// Closed-form cell integrals for Exp(1) on [a, b].
double mass(double a, double b) { return std::exp(-a) - std::exp(-b); }
double first(double a, double b) {
  return (a + 1) * std::exp(-a) - (std::isinf(b) ? 0.0 : (b + 1) * std::exp(-b));
}
double second(double a, double b) {
  return (a * a + 2 * a + 2) * std::exp(-a) -
         (std::isinf(b) ? 0.0 : (b * b + 2 * b + 2) * std::exp(-b));
}

std::vector<double> cell_bounds(const std::vector<double>& g) {
  std::vector<double> b{0.0};
  for (std::size_t i = 0; i + 1 < g.size(); ++i) b.push_back(0.5 * (g[i] + g[i + 1]));
  b.push_back(INFINITY);
  return b;
}

double exact_distortion(const std::vector<double>& g) {
  const auto b = cell_bounds(g);
  double d = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    d += second(b[i], b[i + 1]) - 2 * g[i] * first(b[i], b[i + 1]) +
         g[i] * g[i] * mass(b[i], b[i + 1]);
  return std::sqrt(d);
}

// Fixed-point Lloyd iteration with exact centroids.
std::vector<double> lloyd_exp1(std::size_t nu) {
  std::vector<double> g(nu);
  for (std::size_t i = 0; i < nu; ++i) g[i] = 3.0 * (i + 0.5) / nu;
  for (int it = 0; it < 200000; ++it) {
    const auto b = cell_bounds(g);
    double move = 0.0;
    for (std::size_t i = 0; i < nu; ++i) {
      const double c = first(b[i], b[i + 1]) / mass(b[i], b[i + 1]);
      move = std::max(move, std::abs(c - g[i]));
      g[i] = c;
    }
    if (move < 1e-13) break;
  }
  return g;
}

}  // namespace

TEST(Project, NearestWithLowerTieBreak) {
  const std::vector<double> g{1.0, 2.0, 4.0};
  EXPECT_EQ(project(g, 0.2).index, 0u);
  EXPECT_EQ(project(g, 1.5).index, 0u);
  EXPECT_EQ(project(g, 1.5000001).index, 1u);
  EXPECT_EQ(project(g, 3.0).index, 1u);
  EXPECT_EQ(project(g, 99.0).index, 2u);
  EXPECT_DOUBLE_EQ(project(g, 3.2).codeword, 4.0);
  EXPECT_THROW(project(std::vector<double>{}, 1.0), std::invalid_argument);
}

TEST(Distortion, UniformGridIsExact) {
  const auto u = SojournDistribution::uniform(0.0, 1.0);
  const std::size_t nu = 8;
  std::vector<double> g;
  for (std::size_t k = 1; k <= nu; ++k) g.push_back((2.0 * k - 1) / (2.0 * nu));
  const auto est = distortion_estimate(g, u, 200000, 3);
  const double exact = 1.0 / (std::sqrt(12.0) * nu);
  EXPECT_NEAR(est.rms, exact, 4 * est.se);
  double wsum = 0.0;
  for (double w : est.weights) wsum += w;
  EXPECT_NEAR(wsum, 1.0, 1e-12);
}

TEST(Distortion, NeedsEnoughSamples) {
  EXPECT_THROW(distortion_estimate(std::vector<double>{1.0},
                                   SojournDistribution::exponential(1.0), 10, 1),
               std::invalid_argument);
}

TEST(Clvq, SinglePointIsTheMean) {
  const auto g = clvq_train(SojournDistribution::exponential(20.0), 1, 200000,
                            std::uint64_t{4});
  ASSERT_EQ(g.size(), 1u);
  EXPECT_NEAR(g.points[0], 0.05, 0.05 * 0.02);
  // one cell: distortion is the standard deviation
  EXPECT_NEAR(g.distortion, 0.05, 0.05 * 0.02);
}

TEST(Clvq, CloseToExactOptimum) {
  const auto opt = lloyd_exp1(10);
  const double d_opt = exact_distortion(opt);
  EXPECT_NEAR(d_opt, 0.142087, 5e-6);
  const auto g = clvq_train(SojournDistribution::exponential(1.0), 10, 400000,
                            std::uint64_t{9});
  ASSERT_EQ(g.size(), 10u);
  EXPECT_LT(exact_distortion(g.points), d_opt * 1.03);
  EXPECT_GE(exact_distortion(g.points), d_opt * (1 - 1e-9));
}

TEST(Clvq, ScalesWithRate) {
  const auto g1 = clvq_train(SojournDistribution::exponential(1.0), 10, 300000,
                             std::uint64_t{5});
  const auto g20 = clvq_train(SojournDistribution::exponential(20.0), 10, 300000,
                              std::uint64_t{5});
  EXPECT_NEAR(g20.distortion * 20.0, g1.distortion, 0.05 * g1.distortion);
}

TEST(Clvq, CodewordsNearCellCentroids) {
  const auto g = clvq_train(SojournDistribution::exponential(1.0), 20, 1000000,
                            std::uint64_t{13});
  const auto b = cell_bounds(g.points);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double c = first(b[i], b[i + 1]) / mass(b[i], b[i + 1]);
    EXPECT_NEAR(g.points[i], c, 0.1 * (b[i + 1] == INFINITY ? 1.0 : b[i + 1] - b[i]))
        << "codeword " << i;
  }
}

TEST(Clvq, SortedAndDeterministic) {
  const auto d = SojournDistribution::weibull(1.5, 2.0);
  const auto a = clvq_train(d, 25, 200000, std::uint64_t{42});
  const auto b = clvq_train(d, 25, 200000, std::uint64_t{42});
  EXPECT_EQ(a.points, b.points);
  EXPECT_TRUE(std::is_sorted(a.points.begin(), a.points.end()));
  EXPECT_EQ(a.meta.method, "clvq-split");
}

TEST(Clvq, RejectsBadArguments) {
  const auto e = SojournDistribution::exponential(1.0);
  EXPECT_THROW(clvq_train(e, 0, 100, std::uint64_t{1}), std::invalid_argument);
  EXPECT_THROW(clvq_train(e, 10, 5, std::uint64_t{1}), std::invalid_argument);
  EXPECT_THROW(clvq_train(SojournDistribution::exponential(-2.0), 4, 1000,
                          std::uint64_t{1}),
               std::invalid_argument);
}

TEST(Clvq, PointMassCollapses) {
  const auto d = SojournDistribution::empirical({0.5, 0.5, 0.5}, 1.0);
  const auto g = clvq_train(d, 5, 10000, std::uint64_t{2});
  EXPECT_EQ(g.size(), 1u);
  EXPECT_FALSE(g.meta.warnings.empty());
}

TEST(Lloyd, RefineDoesNotWorsen) {
  const auto d = SojournDistribution::exponential(1.0);
  const auto g = clvq_train(d, 10, 20000, std::uint64_t{3});
  const auto r = lloyd_refine(d, g, 30, 200000, 4);
  EXPECT_LE(exact_distortion(r.points), exact_distortion(g.points) * 1.001);
}

TEST(Rate, SlopeNearMinusOne) {
  const auto r = rate_diagnostic(SojournDistribution::exponential(1.0),
                                 {5, 10, 20, 40}, 400000, 17);
  EXPECT_TRUE(r.ok) << "slope " << r.slope;
  EXPECT_THROW(fit_loglog_slope({1, 2}, {1.0, 0.5}), std::invalid_argument);
}

TEST(UsedPoints, StrictlyBelowHorizon) {
  QuantizationGrid g;
  g.points = {0.01, 0.03};
  EXPECT_EQ(used_points(g, 0.02), 1u);
  EXPECT_EQ(used_points(g, 0.005), 0u);
  EXPECT_EQ(used_points(g, 0.03), 1u);
  EXPECT_EQ(used_points(g, 1.0), 2u);
}

TEST(GridFile, RoundTripAndTamper) {
  const auto g = clvq_train(SojournDistribution::exponential(2.0), 6, 20000,
                            std::uint64_t{8});
  const auto path =
      (std::filesystem::temp_directory_path() / "qkbf_grid_test.json").string();
  save_grid(path, g);
  const auto back = load_grid(path);
  EXPECT_EQ(back.points, g.points);
  EXPECT_EQ(back.meta.seed, g.meta.seed);

  auto j = grid_to_json(g);
  j["points"][0] = 0.123;
  {
    std::ofstream os(path);
    os << j.dump();
  }
  EXPECT_THROW(load_grid(path), std::runtime_error);
  j.erase("checksum");
  EXPECT_THROW(grid_from_json(j), std::runtime_error);
  std::remove(path.c_str());
  EXPECT_THROW(load_grid(path), std::runtime_error);
}

TEST(Clvq, UniformTwoPoints) {
  const auto g = clvq_train(SojournDistribution::uniform(0.0, 1.0), 2, 400000,
                            std::uint64_t{6});
  ASSERT_EQ(g.size(), 2u);
  EXPECT_NEAR(g.points[0], 0.25, 0.01);
  EXPECT_NEAR(g.points[1], 0.75, 0.01);
  EXPECT_NEAR(g.distortion, 1.0 / (4.0 * std::sqrt(3.0)), 0.003);
}

TEST(Lloyd, UniformFromSkewedStart) {
  QuantizationGrid start;
  start.points = {0.1, 0.9};
  const auto r =
      lloyd_refine(SojournDistribution::uniform(0.0, 1.0), start, 40, 100000, 2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_NEAR(r.points[0], 0.25, 1e-2);
  EXPECT_NEAR(r.points[1], 0.75, 1e-2);
}

TEST(Lloyd, AgreesWithClvqOnFastMode) {
  const auto d = SojournDistribution::exponential(20.0);
  const auto g = clvq_train(d, 10, 1000000, std::uint64_t{1});
  const auto r = lloyd_refine(d, g, 30, 200000, 7);
  EXPECT_NEAR(r.distortion, g.distortion, 0.02 * g.distortion);
}

TEST(Distortion, GridOnAllAtomsIsZero) {
  const auto d = SojournDistribution::empirical({0.5, 1.5, 4.0}, 1.0);
  const auto est = distortion_estimate(std::vector<double>{0.5, 1.5, 4.0}, d, 10000, 1);
  EXPECT_EQ(est.rms, 0.0);
}

TEST(Project, Idempotent) {
  const std::vector<double> g{0.25, 0.75, 2.0};
  for (double s : {0.0, 0.4, 0.5, 0.6, 1.3, 9.0}) {
    const auto p = project(g, s);
    EXPECT_EQ(project(g, p.codeword).index, p.index);
  }
  EXPECT_DOUBLE_EQ(project(g, 0.6).codeword, 0.75);
}
