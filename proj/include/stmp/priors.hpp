#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stmp/core.hpp"
#include "stmp/quadrature.hpp"

namespace stmp {

enum class PriorKind { gaussian, gmm, bernoulli_gaussian };

/// One Gaussian term of a scalar mixture. variance == 0 encodes a point mass.
struct MixtureComponent {
  double weight;
  double mean;
  double variance;
};

/// i.i.d. scalar signal prior. All three kinds are finite Gaussian mixtures,
/// which is what makes the smoothed scores and the MMSE exact.
class Prior {
 public:
  static Prior gaussian(double mean, double variance) {
    require(variance > 0.0, "gaussian prior: variance must be positive");
    Prior p(PriorKind::gaussian);
    p.components_ = {{1.0, mean, variance}};
    return p;
  }

  static Prior gmm(std::vector<double> weights, std::vector<double> means, std::vector<double> variances) {
    require(!weights.empty(), "gmm prior: needs at least one component");
    require(weights.size() == means.size() && weights.size() == variances.size(),
            "gmm prior: weights, means and variances must have equal length");
    double total = 0.0;
    for (double w : weights) {
      require(w > 0.0, "gmm prior: weights must be positive");
      total += w;
    }
    require(std::abs(total - 1.0) <= 1e-12, "gmm prior: weights must sum to 1");
    Prior p(PriorKind::gmm);
    for (std::size_t k = 0; k < weights.size(); ++k) {
      require(variances[k] > 0.0, "gmm prior: variances must be positive");
      p.components_.push_back({weights[k], means[k], variances[k]});
    }
    return p;
  }

  static Prior bernoulli_gaussian(double sparsity, double slab_variance) {
    require(sparsity > 0.0 && sparsity <= 1.0, "bernoulli_gaussian prior: need 0 < sparsity <= 1");
    require(slab_variance > 0.0, "bernoulli_gaussian prior: slab variance must be positive");
    Prior p(PriorKind::bernoulli_gaussian);
    if (sparsity < 1.0) p.components_.push_back({1.0 - sparsity, 0.0, 0.0});
    p.components_.push_back({sparsity, 0.0, slab_variance});
    p.sparsity_ = sparsity;
    return p;
  }

  PriorKind kind() const { return kind_; }
  const std::vector<MixtureComponent>& components() const { return components_; }
  double sparsity() const { return sparsity_; }

  double mean() const {
    double m = 0.0;
    for (const auto& c : components_) m += c.weight * c.mean;
    return m;
  }

  /// E[x^2].
  double second_moment() const {
    double m2 = 0.0;
    for (const auto& c : components_) m2 += c.weight * (c.variance + c.mean * c.mean);
    return m2;
  }

  double variance() const { return second_moment() - mean() * mean(); }

  Vector sample(std::size_t n, Rng& rng) const {
    std::vector<double> w;
    for (const auto& c : components_) w.push_back(c.weight);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector x(n);
    for (auto& v : x) {
      const auto& c = components_[pick(rng)];
      v = c.mean + std::sqrt(c.variance) * normal(rng);
    }
    return x;
  }

  std::string describe() const {
    std::ostringstream os;
    os.precision(17);
    switch (kind_) {
      case PriorKind::gaussian:
        os << "gaussian(mean=" << components_[0].mean << ", variance=" << components_[0].variance << ")";
        break;
      case PriorKind::bernoulli_gaussian:
        os << "bernoulli_gaussian(sparsity=" << sparsity_ << ", slab_variance=" << components_.back().variance
           << ")";
        break;
      case PriorKind::gmm:
        os << "gmm(";
        for (std::size_t k = 0; k < components_.size(); ++k) {
          const auto& c = components_[k];
          os << (k ? "; " : "") << c.weight << ":" << c.mean << ":" << c.variance;
        }
        os << ")";
        break;
    }
    return os.str();
  }

 private:
  explicit Prior(PriorKind kind) : kind_(kind) {}

  PriorKind kind_;
  std::vector<MixtureComponent> components_;
  double sparsity_ = 1.0;
};

namespace detail {

inline constexpr double kLogSqrt2Pi = 0.9189385332046727417803297;

inline void require_smoothing(double v, const char* who) {
  if (!(v > 0.0)) throw InvalidArgument(std::string(who) + ": smoothing variance must be positive");
}

/// Derivatives of log (p * N(0, v)) at one point.
struct SmoothedDerivatives {
  double log_density;
  double first;
  double second;
};

inline SmoothedDerivatives smoothed_derivatives(const Prior& prior, double x, double v) {
  const auto& comps = prior.components();
  // Log-sum-exp over responsibilities.
  double max_log = -std::numeric_limits<double>::infinity();
  thread_local std::vector<double> logw;
  logw.resize(comps.size());
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double s = comps[k].variance + v;
    const double d = x - comps[k].mean;
    logw[k] = std::log(comps[k].weight) - 0.5 * std::log(s) - kLogSqrt2Pi - 0.5 * d * d / s;
    max_log = std::max(max_log, logw[k]);
  }
  double z = 0.0, first = 0.0, curv = 0.0;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double s = comps[k].variance + v;
    const double g = std::exp(logw[k] - max_log);
    const double a = -(x - comps[k].mean) / s;
    z += g;
    first += g * a;
    curv += g * (a * a - 1.0 / s);
  }
  first /= z;
  curv /= z;
  return {max_log + std::log(z), first, curv - first * first};
}

}  // namespace detail

/// log of the Gaussian-smoothed prior density (p * N(0, v))(x).
inline double smoothed_log_density(const Prior& prior, double x, double v) {
  detail::require_smoothing(v, "smoothed_log_density");
  return detail::smoothed_derivatives(prior, x, v).log_density;
}

inline double score_first(const Prior& prior, double x, double v) {
  detail::require_smoothing(v, "score_first");
  return detail::smoothed_derivatives(prior, x, v).first;
}

/// Componentwise score of the smoothed prior.
inline Vector score_first(const Prior& prior, std::span<const double> x, double v) {
  detail::require_smoothing(v, "score_first");
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = detail::smoothed_derivatives(prior, x[i], v).first;
  return out;
}

inline double score_second(const Prior& prior, double x, double v) {
  detail::require_smoothing(v, "score_second");
  return detail::smoothed_derivatives(prior, x, v).second;
}

/// (1/N) tr of the Hessian of the smoothed log density.
inline double score_second_trace(const Prior& prior, std::span<const double> x, double v) {
  detail::require_smoothing(v, "score_second_trace");
  require(!x.empty(), "score_second_trace: empty input");
  double acc = 0.0;
  for (double xi : x) acc += detail::smoothed_derivatives(prior, xi, v).second;
  return acc / static_cast<double>(x.size());
}

struct PosteriorMoments {
  double mean;
  double variance;
};

/// Closed-form posterior moments of x given r = x + N(0, v) under a mixture prior.
inline PosteriorMoments posterior_moments(const Prior& prior, double r, double v) {
  detail::require_smoothing(v, "posterior_moments");
  const auto& comps = prior.components();
  std::vector<double> logw(comps.size());
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double s = comps[k].variance + v;
    const double d = r - comps[k].mean;
    logw[k] = std::log(comps[k].weight) - 0.5 * std::log(s) - 0.5 * d * d / s;
    max_log = std::max(max_log, logw[k]);
  }
  // Central second moment, so small posterior variances do not cancel.
  std::vector<double> g(comps.size()), mk(comps.size());
  double z = 0.0, m1 = 0.0;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const auto& c = comps[k];
    g[k] = std::exp(logw[k] - max_log);
    mk[k] = (c.mean * v + r * c.variance) / (c.variance + v);
    z += g[k];
    m1 += g[k] * mk[k];
  }
  m1 /= z;
  double var = 0.0;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const auto& c = comps[k];
    const double d = mk[k] - m1;
    var += g[k] * (c.variance * v / (c.variance + v) + d * d);
  }
  return {m1, var / z};
}

/// Posterior moments by adaptive quadrature over x. Point masses are added
/// exactly; the continuous part is integrated piecewise around each
/// component's posterior peak.
inline PosteriorMoments mmse_oracle(const Prior& prior, double r, double v, double tol = 1e-13) {
  detail::require_smoothing(v, "mmse_oracle");
  const auto& comps = prior.components();

  // Normalise by the largest component evidence so nothing underflows.
  double log_scale = -std::numeric_limits<double>::infinity();
  for (const auto& c : comps) {
    const double s = c.variance + v;
    const double d = r - c.mean;
    log_scale = std::max(log_scale, std::log(c.weight) - 0.5 * std::log(s) - 0.5 * d * d / s);
  }

  double atom_mass = 0.0;
  std::vector<double> breaks;
  for (const auto& c : comps) {
    if (c.variance == 0.0) {
      const double d = r - c.mean;
      atom_mass += std::exp(std::log(c.weight) - 0.5 * std::log(v) - 0.5 * d * d / v - log_scale);
      continue;
    }
    const double prec = 1.0 / c.variance + 1.0 / v;
    const double m = (c.mean / c.variance + r / v) / prec;
    const double sd = 1.0 / std::sqrt(prec);
    for (double k : {-40.0, -12.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 12.0, 40.0}) breaks.push_back(m + k * sd);
  }

  // prior density of the continuous part times the likelihood, rescaled.
  auto weight = [&](double x) {
    double acc = 0.0;
    const double dl = r - x;
    const double loglik = -0.5 * std::log(v) - 0.5 * dl * dl / v;
    for (const auto& c : comps) {
      if (c.variance == 0.0) continue;
      const double d = x - c.mean;
      acc += std::exp(std::log(c.weight) - 0.5 * std::log(c.variance) - detail::kLogSqrt2Pi -
                      0.5 * d * d / c.variance + loglik - log_scale);
    }
    return acc;
  };

  double z = atom_mass, m1 = 0.0;
  for (const auto& c : comps)
    if (c.variance == 0.0) {
      const double d = r - c.mean;
      m1 += c.mean * std::exp(std::log(c.weight) - 0.5 * std::log(v) - 0.5 * d * d / v - log_scale);
    }
  if (!breaks.empty()) {
    const auto mass = quadrature::integrate_piecewise(weight, breaks, tol);
    const auto first = quadrature::integrate_piecewise([&](double x) { return x * weight(x); }, breaks, tol);
    z += mass.value;
    m1 += first.value;
    if (mass.error > 1e-9 * std::abs(mass.value) + 1e-300) {
      std::ostringstream os;
      os << "mmse_oracle: quadrature did not converge (r=" << r << ", v=" << v << ", mass=" << mass.value
         << ", error=" << mass.error << ")";
      throw NumericError(os.str());
    }
  }
  const double mean = m1 / z;

  double central = 0.0;
  for (const auto& c : comps)
    if (c.variance == 0.0) {
      const double d = r - c.mean;
      central += (c.mean - mean) * (c.mean - mean) *
                 std::exp(std::log(c.weight) - 0.5 * std::log(v) - 0.5 * d * d / v - log_scale);
    }
  if (!breaks.empty()) {
    central += quadrature::integrate_piecewise(
                   [&](double x) { return (x - mean) * (x - mean) * weight(x); }, breaks, tol)
                   .value;
  }
  return {mean, central / z};
}

}  // namespace stmp
