#pragma once

#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/quadrature/gauss.hpp>

#include "stmp/core.hpp"

namespace stmp::normal {

inline constexpr double kInvSqrt2Pi = 0.3989422804014326779399461;
inline constexpr double kSqrt2OverPi = 0.7978845608028653558798921;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline double pdf(double x) {
  if (std::isinf(x)) return 0.0;
  return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline double cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double log_pdf(double x) { return -0.5 * x * x - 0.9189385332046727417803297; }

/// Scaled complementary error function exp(x^2) erfc(x).
inline double erfcx(double x) {
  if (x < 25.0) return std::exp(x * x) * std::erfc(x);
  // Asymptotic series; at x >= 25 the truncation error is below 1e-16.
  const double inv2 = 1.0 / (2.0 * x * x);
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k <= 7; ++k) {
    term *= -(2.0 * k - 1.0) * inv2;
    sum += term;
  }
  return sum / (x * std::sqrt(std::numbers::pi));
}

inline double log_cdf(double x) {
  if (x == -kInf) return -kInf;
  if (x > 0.0) return std::log1p(-0.5 * std::erfc(x / std::numbers::sqrt2));
  if (x > -5.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  return std::log(0.5 * erfcx(-x / std::numbers::sqrt2)) - 0.5 * x * x;
}

/// Inverse Mills ratio phi(x) / Phi(x), accurate far into the lower tail.
inline double hazard(double x) {
  if (x == -kInf) return kInf;
  if (x > 0.0) return pdf(x) / cdf(x);
  return kSqrt2OverPi / erfcx(-x / std::numbers::sqrt2);
}

/// Standard normal restricted to (lo, hi]: log of its mass, mean, variance.
struct TruncatedMoments {
  double log_mass;
  double mean;
  double variance;
};

namespace detail {

inline double x_pdf(double x) { return std::isinf(x) ? 0.0 : x * pdf(x); }

// From mass_ratio = (phi(hi) - phi(lo)) / mass and
// slope_ratio = (hi phi(hi) - lo phi(lo)) / mass. Only used where the
// variance is O(1), so 1 - slope - mass^2 does not cancel badly.
inline TruncatedMoments from_ratios(double log_mass, double mass_ratio, double slope_ratio) {
  return {log_mass, -mass_ratio, 1.0 - slope_ratio - mass_ratio * mass_ratio};
}

// Requires hi <= 0. Works with Phi ratios in the log domain.
inline TruncatedMoments lower_tail_moments(double lo, double hi) {
  const double log_hi = log_cdf(hi);
  const double d = log_cdf(lo) - log_hi;  // <= 0
  const double q = std::exp(d);
  const double one_minus_q = -std::expm1(d);
  const double hz_hi = hazard(hi);
  const double hz_lo_q = (lo == -kInf) ? 0.0 : hazard(lo) * q;
  const double lo_term = (lo == -kInf) ? 0.0 : lo * hz_lo_q;
  return from_ratios(log_hi + std::log(one_minus_q), (hz_hi - hz_lo_q) / one_minus_q,
                     (hi * hz_hi - lo_term) / one_minus_q);
}

struct TailMoments {
  double excess;  // E[X] - a
  double variance;
};

// X > a with a >= 3. With F_k = a + k / F_{k+1} from the Mills-ratio
// continued fraction, E[X] - a = 1 / F_2 and Var = r (2 / F_3 - r).
inline TailMoments upper_tail_moments(double a) {
  double f = a;
  for (int k = 300; k >= 3; --k) f = a + k / f;
  const double r = 1.0 / (a + 2.0 / f);
  return {r, r * (2.0 / f - r)};
}

// lo >= 3: difference of the tails at lo and hi, second moments about lo.
inline TruncatedMoments upper_tail_interval(double lo, double hi) {
  const auto tl = upper_tail_moments(lo);
  const double log_lo = log_cdf(-lo);
  if (hi == kInf) return {log_lo, lo + tl.excess, tl.variance};
  const auto th = upper_tail_moments(hi);
  const double d = log_cdf(-hi) - log_lo;
  const double q = std::exp(d);
  const double one_minus_q = -std::expm1(d);
  const double e_hi = (hi - lo) + th.excess;
  const double m1 = (tl.excess - q * e_hi) / one_minus_q;
  const double m2 = (tl.variance + tl.excess * tl.excess - q * (th.variance + e_hi * e_hi)) / one_minus_q;
  return {log_lo + std::log(one_minus_q), lo + m1, m2 - m1 * m1};
}

// Short interval: 24-point Gauss-Legendre in u = x - c, where the weight
// exp(-c u - u^2 / 2) stays within a factor e^2 of 1.
inline TruncatedMoments narrow_interval(double lo, double hi) {
  using Rule = boost::math::quadrature::gauss<double, 24>;
  const double c = 0.5 * (lo + hi);
  const double h = 0.5 * (hi - lo);
  auto w = [&](double u) { return std::exp(-c * u - 0.5 * u * u); };
  const double m0 = Rule::integrate(w, -h, h);
  const double m1 = Rule::integrate([&](double u) { return u * w(u); }, -h, h) / m0;
  const double m2 = Rule::integrate([&](double u) { return (u - m1) * (u - m1) * w(u); }, -h, h) / m0;
  return {std::log(m0) + log_pdf(c), c + m1, m2};
}

}  // namespace detail

inline TruncatedMoments truncated_moments(double lo, double hi) {
  if (!(lo < hi)) throw InvalidArgument("truncated_moments: empty interval");
  const double width = hi - lo;
  if (std::isfinite(width) && width * (std::abs(0.5 * (lo + hi)) + width) <= 4.0)
    return detail::narrow_interval(lo, hi);
  if (lo >= 3.0) return detail::upper_tail_interval(lo, hi);
  if (hi <= -3.0) {
    auto m = detail::upper_tail_interval(-hi, -lo);
    m.mean = -m.mean;
    return m;
  }
  if (lo > 0.0) {
    auto m = detail::lower_tail_moments(-hi, -lo);
    m.mean = -m.mean;
    return m;
  }
  if (hi <= 0.0) return detail::lower_tail_moments(lo, hi);
  // Straddles zero: no cancellation in the mass.
  const double mass = 0.5 * (std::erf(hi / std::numbers::sqrt2) - std::erf(lo / std::numbers::sqrt2));
  return detail::from_ratios(std::log(mass), (pdf(hi) - pdf(lo)) / mass,
                             (detail::x_pdf(hi) - detail::x_pdf(lo)) / mass);
}

}  // namespace stmp::normal
