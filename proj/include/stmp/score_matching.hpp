#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stmp/core.hpp"
#include "stmp/denoisers.hpp"
#include "stmp/priors.hpp"

namespace stmp {

/// Noise levels sigma_i with per-level weights lambda1(sigma_i), lambda2(sigma_i).
struct NoiseSchedule {
  std::vector<double> sigmas;
  std::vector<double> weights_first;
  std::vector<double> weights_second;

  void validate() const {
    require(!sigmas.empty(), "NoiseSchedule: needs at least one level");
    require(weights_first.size() == sigmas.size() && weights_second.size() == sigmas.size(),
            "NoiseSchedule: weight vectors must match sigmas");
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      require(sigmas[i] > 0.0 && weights_first[i] > 0.0 && weights_second[i] > 0.0,
              "NoiseSchedule: entries must be strictly positive");
      if (i) require(sigmas[i] > sigmas[i - 1], "NoiseSchedule: sigmas must be increasing");
    }
  }
};

/// Geometric sigma ladder with the default weights lambda1 = sigma^2,
/// lambda2 = sigma^4.
inline NoiseSchedule geometric_schedule(double sigma_min, double sigma_max, std::size_t levels) {
  require(sigma_min > 0.0 && sigma_max >= sigma_min && levels >= 1, "geometric_schedule: invalid range");
  NoiseSchedule s;
  for (std::size_t i = 0; i < levels; ++i) {
    const double t = levels == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(levels - 1);
    const double sigma = sigma_min * std::pow(sigma_max / sigma_min, t);
    s.sigmas.push_back(sigma);
    s.weights_first.push_back(sigma * sigma);
    s.weights_second.push_back(sigma * sigma * sigma * sigma);
  }
  return s;
}

/// Scalar feature basis: polynomial {1, x, ..., x^degree} or
/// {1, x, exp(-(x - c)^2 / (2 width^2)) for each center c}.
struct FeatureSpec {
  enum class Kind { polynomial, radial };
  Kind kind = Kind::polynomial;
  int degree = 1;
  std::vector<double> centers;
  double width = 1.0;

  std::size_t size() const { return kind == Kind::polynomial ? static_cast<std::size_t>(degree) + 1 : 2 + centers.size(); }

  void evaluate(double x, std::span<double> out) const {
    if (kind == Kind::polynomial) {
      double p = 1.0;
      for (int j = 0; j <= degree; ++j) {
        out[static_cast<std::size_t>(j)] = p;
        p *= x;
      }
      return;
    }
    out[0] = 1.0;
    out[1] = x;
    for (std::size_t j = 0; j < centers.size(); ++j) {
      const double d = (x - centers[j]) / width;
      out[j + 2] = std::exp(-0.5 * d * d);
    }
  }
};

/// Per-sigma linear score models: s(x, sigma_i^2) = theta_i . f(x) and the
/// per-component second-order score phi_i . f(x). Between levels, outputs are
/// interpolated linearly in log sigma^2; outside, the end level is used.
struct LinearScoreModel {
  FeatureSpec features;
  std::vector<double> sigmas;
  std::vector<Vector> first;
  std::vector<Vector> second;

  double score_first(double x, double v) const { return blend(first, x, v); }
  double score_second(double x, double v) const { return blend(second, x, v); }

 private:
  double eval(const Vector& coef, double x) const {
    thread_local std::vector<double> f;
    f.resize(features.size());
    features.evaluate(x, f);
    double acc = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) acc += coef[j] * f[j];
    return acc;
  }

  double blend(const std::vector<Vector>& coefs, double x, double v) const {
    const double lv = std::log(v);
    if (sigmas.size() == 1 || lv <= 2.0 * std::log(sigmas.front())) return eval(coefs.front(), x);
    if (lv >= 2.0 * std::log(sigmas.back())) return eval(coefs.back(), x);
    std::size_t hi = 1;
    while (2.0 * std::log(sigmas[hi]) < lv) ++hi;
    const double l0 = 2.0 * std::log(sigmas[hi - 1]);
    const double l1 = 2.0 * std::log(sigmas[hi]);
    const double t = (lv - l0) / (l1 - l0);
    return (1.0 - t) * eval(coefs[hi - 1], x) + t * eval(coefs[hi], x);
  }
};

/// Tweedie denoiser backed by a fitted linear score model.
struct FittedDenoiser {
  LinearScoreModel model;
  VarianceClamp clamp{};

  DenoiserOutput operator()(std::span<const double> r, double v) const {
    if (!(v > 0.0)) throw InvalidArgument("fitted denoiser: v must be positive");
    DenoiserOutput out{Vector(r.size()), 0.0};
    double trace = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      out.mean[i] = r[i] + v * model.score_first(r[i], v);
      trace += model.score_second(r[i], v);
    }
    out.variance = clamp.apply(v + v * v * trace / static_cast<double>(r.size()), v);
    return out;
  }
};

/// Score model as a callable (x_tilde, sigma^2) -> value.
template <class F>
concept ScalarScore = requires(const F& f, double x, double v) {
  { f(x, v) } -> std::convertible_to<double>;
};

/// Analytic smoothed-prior scores as ScalarScore callables.
struct ExactFirstScore {
  Prior prior;
  double operator()(double x, double v) const { return stmp::score_first(prior, x, v); }
};
struct ExactSecondScore {
  Prior prior;
  double operator()(double x, double v) const { return stmp::score_second(prior, x, v); }
};

/// Monte-Carlo first-order DSM loss E|s(x~) + (x~ - x)/sigma^2|^2, per dimension.
template <ScalarScore S>
double dsm_loss_first(const S& score, const Prior& prior, double sigma, std::size_t samples, std::uint64_t seed) {
  require(sigma > 0.0, "dsm_loss_first: sigma must be positive");
  require(samples >= 1, "dsm_loss_first: samples must be >= 1");
  const double s2 = sigma * sigma;
  Rng rng(seed);
  const Vector x = prior.sample(samples, rng);
  const Vector w = gaussian_vector(samples, s2, rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double b = score(x[i] + w[i], s2) + w[i] / s2;
    acc += b * b;
  }
  return acc / static_cast<double>(samples);
}

/// Monte-Carlo trace-form second-order DSM loss
/// E|tr S(x~) - ||b||^2 + dim/sigma^2|^2 with b = s(x~) + (x~ - x)/sigma^2,
/// over i.i.d. vectors of length `dim`.
template <ScalarScore S2, ScalarScore S1>
double dsm_loss_second_trace(const S2& second, const S1& first, const Prior& prior, double sigma, std::size_t samples,
                             std::uint64_t seed, std::size_t dim = 1) {
  require(sigma > 0.0, "dsm_loss_second_trace: sigma must be positive");
  require(samples >= 1 && dim >= 1, "dsm_loss_second_trace: samples and dim must be >= 1");
  const double s2 = sigma * sigma;
  Rng rng(seed);
  double acc = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const Vector x = prior.sample(dim, rng);
    const Vector w = gaussian_vector(dim, s2, rng);
    double tr = 0.0, bnorm = 0.0;
    for (std::size_t n = 0; n < dim; ++n) {
      const double xt = x[n] + w[n];
      const double b = first(xt, s2) + w[n] / s2;
      tr += second(xt, s2);
      bnorm += b * b;
    }
    const double d = tr - bnorm + static_cast<double>(dim) / s2;
    acc += d * d;
  }
  return acc / static_cast<double>(samples);
}

struct ScoreFitResult {
  LinearScoreModel model;
  std::vector<double> loss_first;   // in-sample l1 per sigma
  std::vector<double> loss_second;  // in-sample l2 per sigma (dim = 1)
  double unified_first = 0.0;
  double unified_second = 0.0;
  double max_normal_residual = 0.0;  // max ||F^T (F c - t)|| / ||F^T t||
};

namespace detail {

inline Eigen::VectorXd least_squares(const Eigen::MatrixXd& f, const Eigen::VectorXd& t, double& residual,
                                     const WarningSink& warn) {
  Eigen::MatrixXd gram = f.transpose() * f;
  const Eigen::VectorXd rhs = f.transpose() * t;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(gram);
  if (qr.rank() < gram.cols()) {
    if (warn) warn("fit_linear_score: rank-deficient feature matrix; using ridge regularisation");
    gram.diagonal().array() += 1e-8 * gram.trace() / static_cast<double>(gram.cols());
    qr.compute(gram);
  }
  Eigen::VectorXd c = qr.solve(rhs);
  // One step of iterative refinement keeps the normal-equation residual at
  // rounding level even for mildly ill-conditioned polynomial bases.
  c += qr.solve(rhs - gram * c);
  residual = (f.transpose() * (f * c - t)).norm() / std::max(rhs.norm(), 1e-300);
  return c;
}

}  // namespace detail

/// Closed-form fit of the linear first-order model per sigma, then the trace
/// model with the first-order model frozen inside b.
inline ScoreFitResult fit_linear_score(const Prior& prior, const NoiseSchedule& schedule, const FeatureSpec& features,
                                       std::size_t samples, std::uint64_t seed,
                                       WarningSink warn = stderr_warnings()) {
  schedule.validate();
  require(samples > features.size(), "fit_linear_score: need more samples than features");
  ScoreFitResult out;
  out.model.features = features;
  out.model.sigmas = schedule.sigmas;
  const std::size_t j = features.size();
  std::vector<double> f(j);
  for (std::size_t level = 0; level < schedule.sigmas.size(); ++level) {
    const double sigma = schedule.sigmas[level];
    const double s2 = sigma * sigma;
    Rng rng(mix_seed(seed, level));
    const Vector x = prior.sample(samples, rng);
    const Vector w = gaussian_vector(samples, s2, rng);

    Eigen::MatrixXd design(static_cast<Eigen::Index>(samples), static_cast<Eigen::Index>(j));
    Eigen::VectorXd target(static_cast<Eigen::Index>(samples));
    for (std::size_t i = 0; i < samples; ++i) {
      features.evaluate(x[i] + w[i], f);
      for (std::size_t k = 0; k < j; ++k) design(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = f[k];
      target(static_cast<Eigen::Index>(i)) = -w[i] / s2;
    }
    double res1 = 0.0, res2 = 0.0;
    const Eigen::VectorXd theta = detail::least_squares(design, target, res1, warn);
    const Eigen::VectorXd fitted = design * theta;

    Eigen::VectorXd target2(static_cast<Eigen::Index>(samples));
    double l1 = 0.0;
    for (std::size_t i = 0; i < samples; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double b = fitted(ii) + w[i] / s2;
      l1 += b * b;
      target2(ii) = b * b - 1.0 / s2;
    }
    const Eigen::VectorXd phi = detail::least_squares(design, target2, res2, warn);
    const double l2 = (design * phi - target2).squaredNorm() / static_cast<double>(samples);
    l1 /= static_cast<double>(samples);

    out.model.first.emplace_back(theta.data(), theta.data() + theta.size());
    out.model.second.emplace_back(phi.data(), phi.data() + phi.size());
    out.loss_first.push_back(l1);
    out.loss_second.push_back(l2);
    out.unified_first += schedule.weights_first[level] * l1;
    out.unified_second += schedule.weights_second[level] * l2;
    out.max_normal_residual = std::max({out.max_normal_residual, res1, res2});
  }
  const double levels = static_cast<double>(schedule.sigmas.size());
  out.unified_first /= levels;
  out.unified_second /= levels;
  return out;
}

}  // namespace stmp
