#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stmp/core.hpp"
#include "stmp/denoisers.hpp"
#include "stmp/operators.hpp"
#include "stmp/priors.hpp"

namespace stmp {

/// Gaussian belief N(mean, variance I).
struct Message {
  Vector mean;
  double variance;
};

struct StmpConfig {
  std::size_t max_iters = 50;
  double rel_change_tol = 1e-6;
  double damping = 1.0;  // beta in (0, 1]
  Vector init_mean;      // empty: zeros
  double init_variance = 0.0;  // <= 0: E[x^2] from the prior (prior-aware entry points only)
  bool record_trace = true;
  VarianceClamp clamp{};
  double lmmse_variance_floor = 1e-12;

  void validate() const {
    require(max_iters >= 1, "StmpConfig: max_iters must be >= 1");
    require(damping > 0.0 && damping <= 1.0, "StmpConfig: damping must lie in (0, 1]");
    require(rel_change_tol >= 0.0, "StmpConfig: rel_change_tol must be nonnegative");
  }
};

struct IterationRecord {
  double v_A_pri = 0.0;
  double v_A_post = 0.0;
  double v_A_ext = 0.0;
  double v_B_pri = 0.0;
  double v_B_post = 0.0;
  double v_B_ext = 0.0;
  double v_C_pri = std::numeric_limits<double>::quiet_NaN();  // quantized runs only
  double v_C_ext = std::numeric_limits<double>::quiet_NaN();
  double nmse = std::numeric_limits<double>::quiet_NaN();
  double rel_change = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

using RunTrace = std::vector<IterationRecord>;

struct RunResult {
  DenoiserOutput final;
  RunTrace trace;
  bool converged = false;
  std::size_t iterations = 0;
};

/// Extrinsic message post / pri (precision subtraction).
inline Message extrinsic(const Message& post, const Message& pri) {
  require_same_size(post.mean.size(), pri.mean.size(), "extrinsic");
  if (!(post.variance > 0.0 && post.variance < pri.variance))
    throw InvariantViolation("extrinsic: need 0 < v_post < v_pri (v_post=" + std::to_string(post.variance) +
                             ", v_pri=" + std::to_string(pri.variance) + ")");
  const double v_ext = 1.0 / (1.0 / post.variance - 1.0 / pri.variance);
  Message out{Vector(post.mean.size()), v_ext};
  for (std::size_t i = 0; i < out.mean.size(); ++i)
    out.mean[i] = v_ext * (post.mean[i] / post.variance - pri.mean[i] / pri.variance);
  return out;
}

/// LMMSE module for a partial-orthogonal operator. The variance is returned
/// unfloored; callers apply their own floor.
inline Message lmmse_update(const MeasurementOperator& op, std::span<const double> y, double noise_variance,
                            const Message& prior) {
  require_same_size(prior.mean.size(), op.n_cols(), "lmmse_update prior");
  require_same_size(y.size(), op.n_rows(), "lmmse_update observations");
  if (!(prior.variance > 0.0)) throw InvalidArgument("lmmse_update: prior variance must be positive");
  const double v = prior.variance;
  const double gain = v / (v + noise_variance);
  Vector residual = op.forward(prior.mean);
  for (std::size_t m = 0; m < residual.size(); ++m) residual[m] = y[m] - residual[m];
  const Vector back = op.adjoint(residual);
  Message post{prior.mean, v - op.sampling_ratio() * v * v / (v + noise_variance)};
  for (std::size_t i = 0; i < post.mean.size(); ++i) post.mean[i] += gain * back[i];
  return post;
}

inline Message lmmse_update(const LinearModel& model, const Message& prior) {
  return lmmse_update(model.op, model.observations, model.noise_variance, prior);
}

namespace detail {

inline Message damp(const Message& fresh, const Message& old, double beta) {
  Message out{Vector(fresh.mean.size()), beta * fresh.variance + (1.0 - beta) * old.variance};
  for (std::size_t i = 0; i < out.mean.size(); ++i)
    out.mean[i] = beta * fresh.mean[i] + (1.0 - beta) * old.mean[i];
  return out;
}

/// Messages carried across A -> B sweeps.
struct TurboState {
  Message a_pri;  // delta -> A
  Message b_pri;  // delta -> B (damped)
  bool started = false;
};

/// One module-A then module-B pass against pseudo-observations (y, noise).
/// Damping uses the previous damped message; beta = 1 on the first sweep.
template <Denoiser D>
DenoiserOutput turbo_sweep(const MeasurementOperator& op, std::span<const double> y, double noise_variance,
                           D& denoise, TurboState& st, const StmpConfig& cfg, IterationRecord& rec) {
  const double beta = st.started ? cfg.damping : 1.0;
  rec.v_A_pri = st.a_pri.variance;

  Message a_post = lmmse_update(op, y, noise_variance, st.a_pri);
  a_post.variance = std::max(a_post.variance, cfg.lmmse_variance_floor);
  const Message a_ext = extrinsic(a_post, st.a_pri);
  rec.v_A_post = a_post.variance;
  rec.v_A_ext = a_ext.variance;

  st.b_pri = st.started ? damp(a_ext, st.b_pri, beta) : a_ext;
  rec.v_B_pri = st.b_pri.variance;

  DenoiserOutput out = denoise(std::span<const double>(st.b_pri.mean), st.b_pri.variance);
  validate_output(out, op.n_cols(), "module B");
  out.variance = cfg.clamp.apply(out.variance, st.b_pri.variance);
  rec.v_B_post = out.variance;

  const Message b_ext = extrinsic(Message{out.mean, out.variance}, st.b_pri);
  rec.v_B_ext = b_ext.variance;
  st.a_pri = st.started ? damp(b_ext, st.a_pri, beta) : b_ext;
  st.started = true;
  return out;
}

inline double relative_change(std::span<const double> now, std::span<const double> before) {
  const double denom = std::sqrt(squared_norm(before));
  const double num = std::sqrt(squared_distance(now, before));
  if (denom == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / denom;
}

inline Message initial_message(const StmpConfig& cfg, std::size_t n) {
  if (!(cfg.init_variance > 0.0)) throw InvalidArgument("StmpConfig: init_variance must be positive");
  Message m{cfg.init_mean.empty() ? Vector(n, 0.0) : cfg.init_mean, cfg.init_variance};
  require_same_size(m.mean.size(), n, "StmpConfig init_mean");
  return m;
}

}  // namespace detail

/// Turbo message passing between the LMMSE module and any MMSE denoiser.
template <Denoiser D>
RunResult run_tmp(const LinearModel& model, D& denoise, const StmpConfig& cfg,
                  std::optional<std::span<const double>> ground_truth = std::nullopt) {
  cfg.validate();
  const std::size_t n = model.op.n_cols();
  if (ground_truth) require_same_size(ground_truth->size(), n, "run_tmp ground truth");

  detail::TurboState st;
  st.a_pri = detail::initial_message(cfg, n);
  RunResult result;
  Vector previous;
  for (std::size_t t = 1; t <= cfg.max_iters; ++t) {
    const auto start = std::chrono::steady_clock::now();
    IterationRecord rec;
    DenoiserOutput out = detail::turbo_sweep(model.op, model.observations, model.noise_variance, denoise, st, cfg, rec);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (ground_truth) rec.nmse = nmse(out.mean, *ground_truth);
    if (!previous.empty()) rec.rel_change = detail::relative_change(out.mean, previous);
    if (cfg.record_trace) result.trace.push_back(rec);
    result.iterations = t;
    previous = out.mean;
    result.final = std::move(out);
    if (t > 1 && rec.rel_change < cfg.rel_change_tol) {
      result.converged = true;
      break;
    }
  }
  return result;
}

template <Denoiser D>
RunResult run_tmp(const LinearModel& model, D&& denoise, const StmpConfig& cfg,
                  std::optional<std::span<const double>> ground_truth = std::nullopt)
  requires(!std::is_lvalue_reference_v<D>)
{
  D local = std::forward<D>(denoise);
  return run_tmp(model, local, cfg, ground_truth);
}

/// STMP with the analytic Tweedie denoiser of `prior`. A non-positive
/// init_variance is replaced by E[x^2] under the prior.
inline RunResult run_stmp(const LinearModel& model, const Prior& prior, StmpConfig cfg,
                          std::optional<std::span<const double>> ground_truth = std::nullopt) {
  if (!(cfg.init_variance > 0.0)) cfg.init_variance = prior.second_moment();
  TweedieDenoiser denoiser{prior, cfg.clamp};
  return run_tmp(model, denoiser, cfg, ground_truth);
}

/// STMP with an arbitrary module-B backend (fitted model, external client).
template <Denoiser D>
RunResult run_stmp(const LinearModel& model, D& denoise, const StmpConfig& cfg,
                   std::optional<std::span<const double>> ground_truth = std::nullopt) {
  return run_tmp(model, denoise, cfg, ground_truth);
}

}  // namespace stmp
