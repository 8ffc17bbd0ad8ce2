#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "stmp/core.hpp"

namespace stmp::quadrature {

/// Gauss-Hermite rule for the weight exp(-t^2) on the real line.
struct HermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

namespace detail {

inline HermiteRule compute_hermite_rule(int n) {
  // Golub-Welsch for starting points, then Newton polishing on the
  // orthonormal recurrence so that tail weights keep full relative accuracy.
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    jacobi(i, i - 1) = jacobi(i - 1, i) = std::sqrt(i / 2.0);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi, Eigen::EigenvaluesOnly);
  HermiteRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  const double pim4 = std::pow(std::numbers::pi, -0.25);
  for (int i = 0; i < n; ++i) {
    double z = solver.eigenvalues()(i);
    double pp = 0.0;
    for (int it = 0; it < 20; ++it) {
      double p1 = pim4;
      double p2 = 0.0;
      for (int j = 1; j <= n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / j) * p2 - std::sqrt((j - 1.0) / j) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      const double step = p1 / pp;
      z -= step;
      if (std::abs(step) < 1e-15 * std::max(1.0, std::abs(z))) break;
    }
    rule.nodes[i] = z;
    rule.weights[i] = 2.0 / (pp * pp);
  }
  return rule;
}

}  // namespace detail

/// Cached rule; safe to call concurrently.
inline const HermiteRule& hermite_rule(int n) {
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<HermiteRule>> cache;
  require(n >= 1, "hermite_rule: node count must be positive");
  std::lock_guard lock(mutex);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<HermiteRule>(detail::compute_hermite_rule(n));
  return *slot;
}

/// E[f(Z)], Z ~ N(0, 1), by an n-node Gauss-Hermite rule.
template <class F>
double standard_normal_expectation(F&& f, int n) {
  const auto& rule = hermite_rule(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    acc += rule.weights[i] * f(std::numbers::sqrt2 * rule.nodes[i]);
  }
  return acc / std::sqrt(std::numbers::pi);
}

struct AdaptiveResult {
  double value;
  double error;
};

namespace detail {

// Bisection around Boost's non-adaptive G15/K31 pair. Boost's own recursion
// compares an unscaled [-1, 1] error against an interval-scaled tolerance,
// so narrow pieces recurse to full depth; here every piece is rescaled.
template <class F>
AdaptiveResult gk_bisect(F& f, double a, double b, double abs_tol, double rel_tol, unsigned depth) {
  using GK = boost::math::quadrature::gauss_kronrod<double, 31>;
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  double err = 0.0;
  const double v = GK::integrate([&](double t) { return half * f(mid + half * t); }, -1.0, 1.0, 0, 0.0, &err);
  if (depth == 0 || err <= std::max(abs_tol, rel_tol * std::abs(v))) return {v, err};
  const auto l = gk_bisect(f, a, mid, 0.5 * abs_tol, rel_tol, depth - 1);
  const auto r = gk_bisect(f, mid, b, 0.5 * abs_tol, rel_tol, depth - 1);
  return {l.value + r.value, l.error + r.error};
}

template <class F>
AdaptiveResult gk_finite(F& f, double a, double b, double tol, unsigned max_depth) {
  const auto first = gk_bisect(f, a, b, 0.0, tol, 0);
  if (first.error <= tol * std::abs(first.value)) return first;
  return gk_bisect(f, a, b, tol * std::abs(first.value), tol, max_depth);
}

}  // namespace detail

/// Adaptive Gauss-Kronrod over [a, b] (finite or infinite bounds). Infinite
/// ranges are mapped onto [0, 1) or (-1, 1) first.
template <class F>
AdaptiveResult integrate(F&& f, double a, double b, double tol = 1e-12, unsigned max_depth = 12) {
  if (std::isnan(a) || std::isnan(b)) throw InvalidArgument("integrate: NaN bound");
  if (a == b) return {0.0, 0.0};
  if (a > b) {
    const auto r = integrate(f, b, a, tol, max_depth);
    return {-r.value, r.error};
  }
  if (std::isfinite(a) && std::isfinite(b)) return detail::gk_finite(f, a, b, tol, max_depth);
  if (std::isfinite(a)) {
    auto g = [&](double t) { return f(a + t / (1.0 - t)) / ((1.0 - t) * (1.0 - t)); };
    return detail::gk_finite(g, 0.0, 1.0, tol, max_depth);
  }
  if (std::isfinite(b)) {
    auto g = [&](double t) { return f(b - t / (1.0 - t)) / ((1.0 - t) * (1.0 - t)); };
    return detail::gk_finite(g, 0.0, 1.0, tol, max_depth);
  }
  auto g = [&](double t) {
    const double d = 1.0 - t * t;
    return f(t / d) * (1.0 + t * t) / (d * d);
  };
  return detail::gk_finite(g, -1.0, 1.0, tol, max_depth);
}

/// Integrate over [breaks.front(), breaks.back()] summing each sub-interval
/// separately. Breakpoints let the adaptive rule see narrow peaks.
template <class F>
AdaptiveResult integrate_piecewise(F&& f, std::vector<double> breaks, double tol = 1e-12) {
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());
  AdaptiveResult total{0.0, 0.0};
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    const auto part = integrate(f, breaks[i], breaks[i + 1], tol);
    total.value += part.value;
    total.error += part.error;
  }
  if (!std::isfinite(total.value)) throw NumericError("adaptive quadrature produced a non-finite value");
  return total;
}

}  // namespace stmp::quadrature
