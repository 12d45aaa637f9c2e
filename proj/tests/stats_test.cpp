#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "gainlab/stats.hpp"
#include "oracles.hpp"

using namespace gainlab;

namespace {

std::vector<SweepOutcome> grid_outcomes(const std::function<double(double, double)>& prob, long trials,
                                        std::uint64_t seed) {
  const auto grid = GainGrid::default_grid();
  std::mt19937_64 rng(seed);
  std::vector<SweepOutcome> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto [index, kp, kd] = grid.cell(i);
    std::binomial_distribution<long> draw(trials, prob(kp, kd));
    SweepOutcome r;
    r.kp = kp;
    r.kd = kd;
    r.trials = trials;
    r.successes = draw(rng);
    r.region = classify_regime(GainConfig::uniform(1, kp, kd), 1.0, grid.stiffness_split()).label();
    rows.push_back(r);
  }
  return rows;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Bonferroni, Examples) {
  EXPECT_NEAR(bonferroni(0.05, 6), 0.05 / 6.0, 1e-15);
  EXPECT_NEAR(bonferroni(0.05, 6), 0.0083, 5e-5);
  EXPECT_NEAR(bonferroni(0.05, 3), 0.017, 5e-4);
  EXPECT_THROW(bonferroni(0.05, 0), InvalidArgument);
  EXPECT_THROW(bonferroni(1.5, 2), InvalidArgument);
}

TEST(Barnard, MatchesDenseGridOracleForSmallMargins) {
  double worst = 0.0;
  for (int n1 = 1; n1 <= 8; ++n1)
    for (int n2 = 1; n2 <= 8; ++n2) {
      const auto ref = oracle::barnard_greater_all(n1, n2, 4001);
      for (int a = 0; a <= n1; ++a)
        for (int c = 0; c <= n2; ++c) {
          const double p = barnard_exact(a, n1 - a, c, n2 - c, Side::Greater).p;
          worst = std::max(worst, std::abs(p - ref[a][c]));
        }
    }
  EXPECT_LT(worst, 1e-3);
}

TEST(Barnard, IdenticalProportionsAreNotSignificant) {
  for (long k : {1L, 3L, 5L, 10L, 25L}) {
    EXPECT_GE(barnard_exact(k, 2 * k, k, 2 * k, Side::Greater).p, 0.5);
    EXPECT_GE(barnard_exact(k, 2 * k, k, 2 * k, Side::Less).p, 0.5);
  }
}

TEST(Barnard, ExtremeTable) {
  EXPECT_LT(barnard_exact(10, 0, 0, 10, Side::Greater).p, 1e-4);
  EXPECT_GT(barnard_exact(10, 0, 0, 10, Side::Less).p, 0.99);
}

TEST(Barnard, MirrorSymmetry) {
  for (long a = 0; a <= 6; ++a)
    for (long c = 0; c <= 5; ++c) {
      const double g = barnard_exact(a, 6 - a, c, 5 - c, Side::Greater).p;
      const double l = barnard_exact(c, 5 - c, a, 6 - a, Side::Less).p;
      EXPECT_NEAR(g, l, 1e-12) << a << " " << c;
    }
}

TEST(Barnard, MoreEvidenceNeverRaisesP) {
  for (long n1 : {4L, 7L})
    for (long n2 : {5L, 9L})
      for (long c = 0; c <= n2; ++c)
        for (long a = 0; a < n1; ++a) {
          const double before = barnard_exact(a, n1 - a, c, n2 - c, Side::Greater).p;
          const double after = barnard_exact(a + 1, n1 - a - 1, c, n2 - c, Side::Greater).p;
          EXPECT_LE(after, before + 1e-9) << n1 << " " << n2 << " " << a << " " << c;
        }
}

TEST(Barnard, LargePooledTablesStayInRange) {
  const auto r = barnard_exact(1105, 195, 1404, 2196, Side::Greater);
  EXPECT_GE(r.p, 0.0);
  EXPECT_LT(r.p, 1e-12);
  EXPECT_GT(r.statistic, 10.0);
  EXPECT_THROW(barnard_exact(0, 0, 1, 1, Side::Greater), InvalidArgument);
  EXPECT_THROW(barnard_exact(-1, 2, 1, 1, Side::Greater), InvalidArgument);
}

TEST(MannWhitney, Examples) {
  const auto r = mannwhitney_u({1, 2, 3}, {4, 5, 6}, Side::Less);
  EXPECT_TRUE(r.exact);
  EXPECT_DOUBLE_EQ(r.u, 0.0);
  EXPECT_NEAR(r.p, 0.05, 1e-12);
  EXPECT_NEAR(mannwhitney_u({4, 5, 6}, {1, 2, 3}, Side::Greater).p, 0.05, 1e-12);
  EXPECT_NEAR(mannwhitney_u({1, 2, 3}, {4, 5, 6}, Side::Greater).p, 1.0, 1e-12);
}

TEST(MannWhitney, ExactMatchesEnumeration) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int n1 = 1; n1 <= 6; ++n1)
    for (int n2 = 1; n2 <= 6; ++n2) {
      std::vector<double> x(n1), y(n2);
      for (auto& v : x) v = u(rng);
      for (auto& v : y) v = u(rng) + 0.2;
      const auto r = mannwhitney_u(x, y, Side::Less);
      ASSERT_TRUE(r.exact);
      EXPECT_NEAR(r.p, oracle::mann_whitney_cdf_enumerate(n1, n2, r.u), 1e-12);
    }
}

TEST(MannWhitney, ExactAndNormalAgreeAtBorderlineSizes) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x(20), y(20);
    for (auto& v : x) v = g(rng) + 0.3;
    for (auto& v : y) v = g(rng);
    for (Side s : {Side::Greater, Side::Less}) {
      const double e = mannwhitney_u(x, y, s, MwMethod::Exact).p;
      const double n = mannwhitney_u(x, y, s, MwMethod::Normal).p;
      EXPECT_NEAR(e, n, 0.01);
    }
  }
}

TEST(MannWhitney, TiesUseNormalApproximation) {
  const auto r = mannwhitney_u({1, 1, 2, 3}, {2, 3, 3, 4}, Side::Less);
  EXPECT_FALSE(r.exact);
  EXPECT_DOUBLE_EQ(r.u, 2.5);
  EXPECT_GT(r.p, 0.0);
  EXPECT_LT(r.p, 0.5);
  EXPECT_DOUBLE_EQ(mannwhitney_u({2, 2}, {2, 2, 2}, Side::Greater).p, 1.0);
  EXPECT_THROW(mannwhitney_u({}, {1.0}, Side::Less), InvalidArgument);
  EXPECT_THROW(mannwhitney_u({1, 1}, {2}, Side::Less, MwMethod::Exact), InvalidArgument);
}

TEST(Logistic, RecoversGenerativeCoefficients) {
  const auto rows = grid_outcomes(
      [](double kp, double kd) { return sigmoid(0.0 - 0.2 * std::log2(kp) + 0.3 * std::log2(kd)); }, 10000, 5);
  const auto fit = logistic_fit(rows);
  ASSERT_TRUE(fit.converged);
  EXPECT_FALSE(fit.separated);
  EXPECT_NEAR(fit.beta[0], 0.0, 0.02);
  EXPECT_NEAR(fit.beta[1], -0.2, 0.02);
  EXPECT_NEAR(fit.beta[2], 0.3, 0.02);
  EXPECT_LT(fit.se.maxCoeff(), 0.02);
}

TEST(Logistic, NullModel) {
  const auto fit = logistic_fit(grid_outcomes([](double, double) { return 0.6; }, 200, 9));
  EXPECT_LT(std::abs(fit.beta[1]), 2.0 * fit.se[1]);
  EXPECT_LT(std::abs(fit.beta[2]), 2.0 * fit.se[2]);
}

TEST(Logistic, MonotoneTableSigns) {
  const auto grid = GainGrid::default_grid();
  std::vector<SweepOutcome> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto c = grid.cell(i);
    SweepOutcome r;
    r.kp = c.kp;
    r.kd = c.kd;
    r.trials = 100;
    // Strictly decreasing in Kp, increasing in Kd, non-logistic shape.
    const double s = 0.5 + 0.06 * std::log2(c.kd) - 0.05 * std::log2(c.kp) + 0.002 * std::log2(c.kd) * std::log2(c.kd);
    r.successes = std::lround(100.0 * std::clamp(s, 0.02, 0.98));
    rows.push_back(r);
  }
  const auto fit = logistic_fit(rows);
  EXPECT_LT(fit.beta[1], 0.0);
  EXPECT_GT(fit.beta[2], 0.0);
}

TEST(Logistic, SeparationIsFlagged) {
  auto rows = grid_outcomes([](double kp, double) { return kp < 100 ? 1.0 : 0.0; }, 50, 1);
  const auto fit = logistic_fit(rows);
  EXPECT_TRUE(fit.separated);
  EXPECT_FALSE(fit.warnings.empty());
  rows.resize(2);
  EXPECT_THROW(logistic_fit(rows), InvalidArgument);
}

TEST(Ols, RecoversGenerativeCoefficients) {
  const auto grid = GainGrid::default_grid();
  std::mt19937_64 rng(21);
  std::normal_distribution<double> noise(0.0, 0.01);
  std::vector<SweepOutcome> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto c = grid.cell(i);
    for (int k = 0; k < 10000; ++k) {
      SweepOutcome r;
      r.kp = c.kp;
      r.kd = c.kd;
      r.scalar_error = std::exp(-3.0 + 0.4 * std::log2(c.kp) + 0.25 * std::log2(c.kd) + noise(rng));
      rows.push_back(r);
    }
  }
  const auto fit = ols_log_fit(rows);
  EXPECT_NEAR(fit.beta[0], -3.0, 0.02);
  EXPECT_NEAR(fit.beta[1], 0.4, 0.02);
  EXPECT_NEAR(fit.beta[2], 0.25, 0.02);
}

TEST(Ols, ConstantErrorGivesFlatSlopes) {
  const auto grid = GainGrid::default_grid();
  std::vector<SweepOutcome> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto c = grid.cell(i);
    rows.push_back({c.kp, c.kd, 0, 0, 0.1, Regime::CO});
  }
  const auto fit = ols_log_fit(rows);
  EXPECT_EQ(fit.beta[1], 0.0);
  EXPECT_EQ(fit.beta[2], 0.0);
  EXPECT_NEAR(fit.beta[0], std::log(0.1), 1e-15);
}

TEST(Ols, PermutationAndDuplicationInvariant) {
  const auto grid = GainGrid::default_grid();
  std::mt19937_64 rng(4);
  std::lognormal_distribution<double> e(-4.0, 0.5);
  std::vector<SweepOutcome> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto c = grid.cell(i);
    rows.push_back({c.kp, c.kd, 0, 0, e(rng) * c.kp / 16.0, Regime::CO});
  }
  const auto base = ols_log_fit(rows);
  auto shuffled = rows;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  EXPECT_LT((ols_log_fit(shuffled).beta - base.beta).cwiseAbs().maxCoeff(), 1e-10);
  auto doubled = rows;
  doubled.insert(doubled.end(), rows.begin(), rows.end());
  EXPECT_LT((ols_log_fit(doubled).beta - base.beta).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Ols, MonotoneTableSignsAndRankDeficiency) {
  const auto grid = GainGrid::default_grid();
  std::vector<SweepOutcome> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto c = grid.cell(i);
    rows.push_back({c.kp, c.kd, 0, 0, 0.001 * std::sqrt(c.kp) + 0.0005 * c.kd * c.kd / 100.0, Regime::CO});
  }
  const auto fit = ols_log_fit(rows);
  EXPECT_GT(fit.beta[1], 0.0);
  EXPECT_GT(fit.beta[2], 0.0);

  std::vector<SweepOutcome> line;
  for (double k : {16.0, 32.0, 64.0, 128.0, 256.0}) line.push_back({k, 2.0 * k, 0, 0, 0.01 * k, Regime::CO});
  EXPECT_THROW(ols_log_fit(line), InvalidArgument);
}

TEST(RegionTest, SuccessEffectRejects) {
  const auto rows = grid_outcomes(
      [](double kp, double kd) {
        const bool co = kd >= 2.0 * std::sqrt(kp) && kp < 128.0;
        return co ? 0.85 : 0.39;
      },
      100, 13);
  const auto rep = region_test(rows, Regime::CO, Metric::Success, 0.05, 6, Side::Greater);
  EXPECT_EQ(rep.test, "barnard");
  EXPECT_NEAR(rep.alpha_adj, 0.0083, 5e-5);
  EXPECT_TRUE(rep.reject);
  EXPECT_EQ(stats_csv_row(rep).substr(0, 11), "barnard,CO,");
}

TEST(RegionTest, ErrorEffectRejects) {
  auto rows = grid_outcomes([](double, double) { return 0.5; }, 10, 2);
  std::mt19937_64 rng(8);
  std::lognormal_distribution<double> spread(0.0, 0.3);
  for (auto& r : rows) r.scalar_error = (r.region == Regime::SO ? 0.043 : 0.010) * spread(rng);
  const auto rep = region_test(rows, Regime::SO, Metric::Error, 0.05, 3, Side::Greater);
  EXPECT_EQ(rep.test, "mannwhitney");
  EXPECT_NEAR(rep.alpha_adj, 0.017, 5e-4);
  EXPECT_TRUE(rep.reject);
  const auto against = region_test(rows, Regime::SO, Metric::Error, 0.05, 3, Side::Less);
  EXPECT_FALSE(against.reject);
}

TEST(RegionTest, NoEffectDoesNotReject) {
  const auto rows = grid_outcomes([](double, double) { return 0.5; }, 100, 17);
  EXPECT_FALSE(region_test(rows, Regime::CO, Metric::Success, 0.05, 6, Side::Greater).reject);
}

TEST(SweepCsv, RoundTrip) {
  std::vector<SweepOutcome> rows{{16, 8, 90, 100, 0.01, Regime::CO}, {1024, 2, 10, 100, std::nullopt, Regime::SU}};
  std::stringstream ss;
  write_sweep_csv(ss, rows);
  EXPECT_EQ(ss.str(), "kp,kd,successes,trials,scalar_error,region\n16,8,90,100,0.01,CO\n1024,2,10,100,,SU\n");
  const auto back = read_sweep_csv(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].successes, 90);
  EXPECT_FALSE(back[1].scalar_error.has_value());
  EXPECT_EQ(back[1].region, Regime::SU);
  std::stringstream bad("kp,kd\n");
  EXPECT_THROW(read_sweep_csv(bad), InvalidArgument);
  EXPECT_EQ(stats_csv_header(), "test,region,statistic,p,alpha_adj,reject");
}
