#pragma once

#include <cmath>
#include <concepts>
#include <functional>
#include <span>
#include <string>

#include "stmp/core.hpp"
#include "stmp/operators.hpp"
#include "stmp/priors.hpp"

namespace stmp {

/// Module-B output: posterior mean and the shared scalar posterior variance.
struct DenoiserOutput {
  Vector mean;
  double variance;
};

/// Anything mapping (r, v) to a DenoiserOutput. Non-const call so stateful
/// backends (protocol clients) qualify.
template <class D>
concept Denoiser = requires(D& d, std::span<const double> r, double v) {
  { d(r, v) } -> std::convertible_to<DenoiserOutput>;
};

using AnyDenoiser = std::function<DenoiserOutput(std::span<const double>, double)>;

/// Keeps v_post inside [floor, cap_ratio * v_pri] so the extrinsic update
/// never divides by a non-positive precision difference.
struct VarianceClamp {
  double floor = 1e-9;
  double cap_ratio = 0.999;

  double apply(double raw, double v_pri) const {
    const double cap = cap_ratio * v_pri;
    if (!(raw > floor)) raw = floor;
    return std::min(raw, cap);
  }
};

inline void validate_output(const DenoiserOutput& out, std::size_t n, const char* who) {
  require_same_size(out.mean.size(), n, who);
  if (!all_finite(out.mean) || !std::isfinite(out.variance))
    throw NumericError(std::string(who) + ": non-finite denoiser output");
  if (!(out.variance > 0.0)) throw NumericError(std::string(who) + ": non-positive posterior variance");
}

/// Score-based MMSE denoiser through first- and second-order Tweedie, with the
/// analytic smoothed-prior scores standing in for a learned model.
struct TweedieDenoiser {
  Prior prior;
  VarianceClamp clamp{};

  DenoiserOutput operator()(std::span<const double> r, double v) const {
    if (!(v > 0.0)) throw InvalidArgument("denoise_tweedie: v must be positive");
    DenoiserOutput out{Vector(r.size()), 0.0};
    double trace = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const auto d = detail::smoothed_derivatives(prior, r[i], v);
      out.mean[i] = r[i] + v * d.first;
      trace += d.second;
    }
    const double raw = v + v * v * trace / static_cast<double>(r.size());
    out.variance = clamp.apply(raw, v);
    return out;
  }
};

inline DenoiserOutput denoise_tweedie(const Prior& prior, std::span<const double> r, double v) {
  return TweedieDenoiser{prior}(r, v);
}

/// Same contract, computed from the closed-form posterior instead of scores.
struct PosteriorDenoiser {
  Prior prior;
  VarianceClamp clamp{};

  DenoiserOutput operator()(std::span<const double> r, double v) const {
    if (!(v > 0.0)) throw InvalidArgument("posterior denoiser: v must be positive");
    DenoiserOutput out{Vector(r.size()), 0.0};
    double acc = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const auto pm = posterior_moments(prior, r[i], v);
      out.mean[i] = pm.mean;
      acc += pm.variance;
    }
    out.variance = clamp.apply(acc / static_cast<double>(r.size()), v);
    return out;
  }
};

/// Same contract again, by adaptive quadrature. Slow; for verification.
struct QuadratureDenoiser {
  Prior prior;
  VarianceClamp clamp{};

  DenoiserOutput operator()(std::span<const double> r, double v) const {
    DenoiserOutput out{Vector(r.size()), 0.0};
    double acc = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const auto pm = mmse_oracle(prior, r[i], v);
      out.mean[i] = pm.mean;
      acc += pm.variance;
    }
    out.variance = clamp.apply(acc / static_cast<double>(r.size()), v);
    return out;
  }
};

/// Residual-based estimate (||y - A x||^2 - M d0^2) / ||A||_F^2, with
/// ||A||_F^2 = M for partial-orthogonal operators. Only unbiased when the
/// denoising error is Gaussian and independent of the measurement noise.
inline double variance_residual(const LinearModel& model, std::span<const double> x_post,
                                double floor = 1e-9) {
  const auto ax = model.op.forward(x_post);
  const double m = static_cast<double>(model.op.n_rows());
  const double raw = (squared_distance(model.observations, ax) - m * model.noise_variance) / m;
  return std::max(raw, floor);
}

struct DivergenceEstimatorConfig {
  std::size_t probe_count = 16;
  double probe_step = 0.0;  // 0 selects 1e-3 * sqrt(v)
  std::uint64_t seed = 0;

  double step_for(double v) const { return probe_step > 0.0 ? probe_step : 1e-3 * std::sqrt(v); }
};

/// Monte-Carlo divergence estimate alpha * v of the posterior variance, from
/// K extra denoiser calls at r + step * eps. Small steps are numerically
/// fragile; a non-finite estimate is reported as a NumericError.
template <Denoiser D>
double variance_divergence(D& denoise, std::span<const double> r, double v, const DivergenceEstimatorConfig& cfg) {
  if (!(v > 0.0)) throw InvalidArgument("variance_divergence: v must be positive");
  require(cfg.probe_count >= 1, "variance_divergence: probe_count must be >= 1");
  require(cfg.probe_step >= 0.0, "variance_divergence: probe_step must be positive");
  const double step = cfg.step_for(v);
  const DenoiserOutput base = denoise(r, v);
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal;
  Vector eps(r.size()), probe(r.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < cfg.probe_count; ++k) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      eps[i] = normal(rng);
      probe[i] = r[i] + step * eps[i];
    }
    const DenoiserOutput moved = denoise(std::span<const double>(probe), v);
    double inner = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) inner += (moved.mean[i] - base.mean[i]) * eps[i];
    acc += inner / step;
  }
  const double alpha = acc / (static_cast<double>(r.size()) * static_cast<double>(cfg.probe_count));
  if (!std::isfinite(alpha)) throw NumericError("variance_divergence: non-finite divergence estimate");
  return alpha * v;
}

}  // namespace stmp
