#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "stmp/denoisers.hpp"
#include "stmp/quadrature.hpp"
#include "stmp/state_evolution.hpp"

namespace {

using stmp::Prior;
using stmp::Vector;

Prior symmetric_gmm() { return Prior::gmm({0.5, 0.5}, {-1.0, 1.0}, {0.04, 0.04}); }

TEST(MseFunction, GaussianClosedForm) {
  for (double v : {1e-6, 1e-3, 0.1, 1.0, 50.0})
    EXPECT_NEAR(stmp::mse_function(Prior::gaussian(0.4, 2.0), v), 2.0 * v / (2.0 + v), 1e-12 * v);
}

TEST(MseFunction, HermiteAgreesWithAdaptive) {
  for (const auto& p : {symmetric_gmm(), Prior::bernoulli_gaussian(0.1, 1.0)})
    for (double v : {1e-4, 1e-2, 0.3, 3.0}) {
      const double a = stmp::mse_function(p, v);
      const double b = stmp::detail::mse_function_adaptive(p, v);
      EXPECT_NEAR(a, b, 1e-8 * a) << p.describe() << " " << v;
    }
}

TEST(MseFunction, MatchesMonteCarlo) {
  const Prior p = symmetric_gmm();
  const std::size_t n = 200000;
  for (double v : {0.05, 0.5}) {
    stmp::Rng rng(3);
    const Vector x = p.sample(n, rng);
    const Vector e = stmp::gaussian_vector(n, v, rng);
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double err = stmp::posterior_moments(p, x[i] + e[i], v).mean - x[i];
      sum += err * err;
      sum2 += err * err * err * err;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    EXPECT_NEAR(stmp::mse_function(p, v), mean, 4 * se) << v;
  }
}

TEST(MseFunction, BoundedAndMonotone) {
  const Prior p = symmetric_gmm();
  double last = 0.0;
  for (double v = 1e-5; v < 1e3; v *= 1.7) {
    const double m = stmp::mse_function(p, v);
    EXPECT_LT(m, v);
    EXPECT_LT(m, p.variance());
    EXPECT_GE(m, last);
    last = m;
  }
}

TEST(Isotonic, PoolsViolators) {
  const Vector y{1.0, 3.0, 2.0, 4.0, 0.0};
  EXPECT_EQ(stmp::isotonic_nondecreasing(y), (Vector{1.0, 2.25, 2.25, 2.25, 2.25}));
  const Vector sorted{0.1, 0.2, 0.2, 5.0};
  EXPECT_EQ(stmp::isotonic_nondecreasing(sorted), sorted);
}

TEST(MseTable, InterpolatesAndClamps) {
  std::vector<std::string> warnings;
  const stmp::MseGridSpec spec{1e-4, 4, 32};
  auto table = stmp::build_mse_table(symmetric_gmm(), spec, [&](const std::string& w) { warnings.push_back(w); });
  const auto& g = table.grid();
  ASSERT_EQ(g.size(), 129u);
  EXPECT_DOUBLE_EQ(g.front(), 1e-4);
  EXPECT_NEAR(g.back(), 1.0, 1e-12);
  for (std::size_t i = 0; i < g.size(); i += 16) EXPECT_DOUBLE_EQ(table(g[i]), table.values()[i]);
  for (double v : {2.3e-4, 0.0071, 0.31})
    EXPECT_NEAR(table(v), stmp::mse_function(symmetric_gmm(), v), 2e-3 * table(v)) << v;
  EXPECT_TRUE(warnings.empty());
  EXPECT_DOUBLE_EQ(table(1e-9), table.values().front());
  EXPECT_DOUBLE_EQ(table(10.0), table.values().back());
  EXPECT_EQ(table.out_of_range_queries(), 2u);
  EXPECT_EQ(warnings.size(), 2u);
}

TEST(MseTable, RejectsMalformedTables) {
  EXPECT_THROW(stmp::MseTable({1.0}, {0.5}), stmp::InvalidArgument);
  EXPECT_THROW(stmp::MseTable({1.0, 0.5}, {0.1, 0.2}), stmp::InvalidArgument);
  EXPECT_THROW(stmp::MseTable({1.0, 2.0}, {0.1, -0.2}), stmp::InvalidArgument);
  EXPECT_THROW(stmp::MseGridSpec({0.0, 1, 1}).points(), stmp::InvalidArgument);
}

TEST(MseTable, MonteCarloTableTracksAnalytic) {
  stmp::PosteriorDenoiser d{symmetric_gmm(), {0.0, 1.0}};
  const stmp::MseGridSpec spec{1e-3, 3, 4};
  const auto mc = stmp::build_mse_table_monte_carlo(d, symmetric_gmm(), spec, 40000, 5, {});
  for (std::size_t i = 0; i < mc.grid().size(); ++i) {
    const double want = stmp::mse_function(symmetric_gmm(), mc.grid()[i]);
    EXPECT_NEAR(mc.values()[i], want, 0.05 * want) << mc.grid()[i];
  }
}

TEST(SeStmp, GaussianFixedPointIsLmmse) {
  // v_A stays at tau; the MSE equals the LMMSE average posterior variance
  // tau - (M/N) tau^2 / (tau + d2).
  const auto se = stmp::run_se_stmp(Prior::gaussian(0.0, 1.0), 0.5, 0.01);
  ASSERT_TRUE(se.converged);
  EXPECT_NEAR(se.fixed_mse, 1.0 - 0.5 / 1.01, 1e-12);
  EXPECT_NEAR(se.fixed_mse, 0.50495, 5e-6);
  EXPECT_LE(se.records.size(), 2u);
}

TEST(SeStmp, TableAndDirectAgree) {
  const auto table = stmp::build_mse_table(symmetric_gmm(), {}, {});
  for (double ratio : {0.2, 0.8}) {
    const auto direct = stmp::run_se_stmp(symmetric_gmm(), ratio, 0.01);
    const auto tabled = stmp::run_se_stmp(table, ratio, 0.01, symmetric_gmm().second_moment());
    ASSERT_TRUE(direct.converged && tabled.converged);
    EXPECT_NEAR(tabled.fixed_mse, direct.fixed_mse, 2e-3 * direct.fixed_mse) << ratio;
  }
}

TEST(SeStmp, MoreMeasurementsNeverHurt) {
  double last = 1e9;
  for (double ratio : {0.2, 0.35, 0.5, 0.65, 0.8, 1.0}) {
    const auto se = stmp::run_se_stmp(symmetric_gmm(), ratio, 0.01);
    EXPECT_LT(se.fixed_mse, last);
    last = se.fixed_mse;
  }
}

TEST(SeStmp, FlagsDivergence) {
  const auto se = stmp::run_se_stmp(symmetric_gmm(), 0.01, 1e12);
  EXPECT_TRUE(se.diverged);
  EXPECT_FALSE(se.converged);
  EXPECT_THROW(stmp::run_se_stmp(symmetric_gmm(), 0.0, 0.01), stmp::InvalidArgument);
  EXPECT_THROW(stmp::run_se_stmp(symmetric_gmm(), 0.5, -1.0), stmp::InvalidArgument);
}

// Integral over Dz of phi(z)^2 (1 / Phi(z) + 1 / Phi(-z)), written out directly.
double sign_fisher_integral() {
  auto f = [](double z) {
    const double phi = std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi);
    const double up = 0.5 * std::erfc(-z / std::numbers::sqrt2), down = 0.5 * std::erfc(z / std::numbers::sqrt2);
    return phi * phi * phi * (1.0 / up + 1.0 / down);
  };
  return stmp::quadrature::integrate_piecewise(f, {-30.0, -5.0, 0.0, 5.0, 30.0}, 1e-14).value;
}

TEST(Theta, IdentityIsInverseTotalVariance) {
  EXPECT_DOUBLE_EQ(stmp::theta(0.3, 0.1, stmp::identity_quantizer(), 1.0), 2.5);
}

TEST(Theta, OneBitLimits) {
  const auto sign = stmp::make_midrise(1, 1.0);
  EXPECT_NEAR(stmp::theta(0.9999, 0.0, sign, 1.0), 2.0 / std::numbers::pi, 1e-4);
  EXPECT_NEAR(stmp::theta(1.0, 0.0, sign, 1.0), 2.0 / std::numbers::pi, 1e-14);
  EXPECT_NEAR(sign_fisher_integral(), 0.48054, 5e-6);
  EXPECT_NEAR(0.5 * stmp::theta(0.5, 0.0, sign, 1.0), sign_fisher_integral(), 1e-9);
  EXPECT_GT(stmp::theta(1e-4, 0.0, sign, 1.0), 50.0);
  EXPECT_THROW(stmp::theta(1.5, 0.0, sign, 1.0), stmp::InvalidArgument);
  EXPECT_THROW(stmp::theta(0.0, 0.0, sign, 1.0), stmp::InvalidArgument);
}

// Fisher information of the bin label about its mean, by sampling.
double theta_monte_carlo(double v_a, double d2, const stmp::QuantizerSpec& q, double v_z, std::size_t n,
                         std::uint64_t seed) {
  stmp::Rng rng(seed);
  std::normal_distribution<double> normal;
  const double s = std::sqrt(v_a + d2);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double mu = std::sqrt(v_z - v_a) * normal(rng);
    const int b = stmp::bin_of(q, mu + s * normal(rng));
    const double a = (q.lower(b) - mu) / s, c = (q.upper(b) - mu) / s;
    const double pa = std::isinf(a) ? 0.0 : std::exp(-0.5 * a * a), pc = std::isinf(c) ? 0.0 : std::exp(-0.5 * c * c);
    const double mass = 0.5 * (std::erfc(-c / std::numbers::sqrt2) - std::erfc(-a / std::numbers::sqrt2));
    const double score = (pa - pc) / std::sqrt(2 * std::numbers::pi) / (s * mass);
    acc += score * score;
  }
  return acc / double(n);
}

TEST(Theta, MatchesMonteCarlo) {
  const auto q = stmp::make_midrise(2, 0.9);
  const double quad = stmp::theta(0.3, 0.05, q, 1.04);
  const double mc = theta_monte_carlo(0.3, 0.05, q, 1.04, 400000, 9);
  EXPECT_NEAR(mc, quad, 0.02 * quad);
}

TEST(SeQstmp, IdentityQuantizerMatchesUnquantizedSe) {
  const auto a = stmp::run_se_qstmp(Prior::gaussian(0.0, 1.0), 0.5, 0.01, stmp::identity_quantizer());
  const auto b = stmp::run_se_stmp(Prior::gaussian(0.0, 1.0), 0.5, 0.01);
  EXPECT_NEAR(a.fixed_mse, b.fixed_mse, 1e-12);
}

TEST(SeQstmp, MoreBitsNeverHurt) {
  const Prior p = symmetric_gmm();
  const double d2 = 0.25;
  const double sd = std::sqrt(p.second_moment() + d2);
  double last = 1e9;
  for (unsigned bits : {1u, 2u, 3u, 5u, 12u}) {
    const auto se = stmp::run_se_qstmp(p, 0.8, d2, stmp::make_midrise(bits, stmp::default_midrise_interval(bits, sd)));
    ASSERT_TRUE(se.converged) << bits;
    EXPECT_LT(se.fixed_mse, last) << bits;
    last = se.fixed_mse;
  }
  const auto unq = stmp::run_se_stmp(p, 0.8, d2);
  EXPECT_NEAR(last, unq.fixed_mse, 0.01 * unq.fixed_mse);
}

}  // namespace
