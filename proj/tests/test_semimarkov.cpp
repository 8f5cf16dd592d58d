#include <qkbf/semimarkov.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"

using namespace qkbf;

TEST(Trajectory, CoversHorizonWithIncreasingJumps) {
  const auto m = maglev_preset();
  Rng rng(11);
  for (int r = 0; r < 200; ++r) {
    const auto tr = sample_trajectory(m, 0.5, 1000, rng);
    ASSERT_FALSE(tr.censored);
    EXPECT_GT(tr.t_jump.back(), 0.5);
    for (std::size_t k = 1; k < tr.t_jump.size(); ++k) {
      EXPECT_GT(tr.t_jump[k], tr.t_jump[k - 1]);
      EXPECT_NEAR(tr.t_jump[k] - tr.t_jump[k - 1], tr.s[k], 1e-15);
      EXPECT_NE(tr.z[k], tr.z[k - 1]);
    }
  }
}

TEST(Trajectory, ModeAtJumpIsPostJump) {
  Trajectory tr;
  tr.z = {0, 1, 0};
  tr.t_jump = {0.0, 0.3, 0.7};
  tr.s = {0.0, 0.3, 0.4};
  tr.horizon = 0.5;
  EXPECT_EQ(mode_at(tr, 0.0), 0);
  EXPECT_EQ(mode_at(tr, 0.29), 0);
  EXPECT_EQ(mode_at(tr, 0.3), 1);
  EXPECT_EQ(mode_at(tr, 0.5), 1);
  EXPECT_THROW(mode_at(tr, 0.6), std::out_of_range);
  EXPECT_THROW(mode_at(tr, -0.1), std::out_of_range);
  EXPECT_EQ(tr.jumps_before(0.3), 1u);
  EXPECT_DOUBLE_EQ(tr.restriction_end(0), 0.3);
  EXPECT_DOUBLE_EQ(tr.restriction_end(1), 0.5);
}

TEST(Trajectory, CensoredWhenJumpBudgetRunsOut) {
  const auto m = fixtures::scalar_pair(1.0, 1.0, 1000.0, 1000.0);
  const auto tr = sample_trajectory(m, 1.0, 5, std::uint64_t{3});
  EXPECT_TRUE(tr.censored);
  EXPECT_EQ(tr.n_jumps(), 5u);
  EXPECT_LT(tr.t_jump.back(), 1.0);
  EXPECT_THROW(mode_at(tr, 0.9), std::out_of_range);
}

TEST(Trajectory, FirstSojournMatchesExponentialMean) {
  const auto m = maglev_preset();
  Rng rng(21);
  const int n = 20000;
  double sum = 0.0, sumsq = 0.0;
  int count = 0;
  for (int r = 0; r < n; ++r) {
    const auto tr = sample_trajectory(m, 1e-9, 10, rng);
    if (tr.z[0] != 0) continue;
    sum += tr.s[1];
    sumsq += tr.s[1] * tr.s[1];
    ++count;
  }
  const double mean = sum / count;
  const double se = std::sqrt((sumsq / count - mean * mean) / count);
  EXPECT_NEAR(mean, 0.05, 4 * se);
}

TEST(Trajectory, InitialModeFrequencies) {
  const auto m = fixtures::scalar_pair(1.0, 2.0, 1.0, 1.0);
  auto mm = m;
  mm.init_mode_dist << 0.3, 0.7;
  Rng rng(8);
  int first = 0;
  const int n = 20000;
  for (int r = 0; r < n; ++r) first += sample_trajectory(mm, 0.1, 10, rng).z[0] == 0;
  const double p = static_cast<double>(first) / n;
  EXPECT_NEAR(p, 0.3, 4 * std::sqrt(0.3 * 0.7 / n));
}

TEST(Trajectory, AbsorbingSingleModeNeverJumps) {
  Matrix one = Matrix::Ones(1, 1);
  const auto m = fixtures::single_mode({-one, one, one, one}, one);
  const auto tr = sample_trajectory(m, 2.0, 10, std::uint64_t{1});
  EXPECT_EQ(tr.n_jumps(), 1u);
  EXPECT_TRUE(std::isinf(tr.t_jump[1]));
  EXPECT_EQ(mode_at(tr, 2.0), 0);
}

TEST(Trajectory, SameSeedSamePath) {
  const auto m = maglev_preset();
  const auto a = sample_trajectory(m, 0.3, 100, std::uint64_t{77});
  const auto b = sample_trajectory(m, 0.3, 100, std::uint64_t{77});
  EXPECT_EQ(a.t_jump, b.t_jump);
  EXPECT_EQ(a.z, b.z);
}

TEST(Trajectory, CsvHasOneBasedModes) {
  Trajectory tr;
  tr.z = {0, 1};
  tr.t_jump = {0.0, 0.25};
  tr.s = {0.0, 0.25};
  tr.horizon = 0.1;
  std::ostringstream os;
  write_trajectory_csv(os, tr);
  EXPECT_EQ(os.str(), "k,Z_k,T_k,S_k\n0,1,0,0\n1,2,0.25,0.25\n");
}

TEST(Trajectory, RejectsBadArguments) {
  const auto m = maglev_preset();
  Rng rng(1);
  EXPECT_THROW(sample_trajectory(m, 0.0, 10, rng), std::invalid_argument);
  EXPECT_THROW(sample_trajectory(m, 1.0, 0, rng), std::invalid_argument);
}
