#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "stmp/core.hpp"
#include "stmp/msgpass.hpp"
#include "stmp/normal.hpp"
#include "stmp/operators.hpp"

namespace stmp {

/// Uniform mid-rise quantizer with 2^bits bins. Bins are numbered 1..2^bits;
/// bin b covers (thresholds[b-1], thresholds[b]]. The identity "quantizer"
/// passes real-valued observations through.
struct QuantizerSpec {
  unsigned bits = 0;
  double interval = 0.0;
  std::vector<double> thresholds;  // 2^bits + 1 entries, -inf ... +inf
  std::vector<double> levels;      // 2^bits entries
  bool identity = false;

  bool is_identity() const { return identity; }
  std::size_t bin_count() const { return levels.size(); }
  double lower(int bin) const { return thresholds[static_cast<std::size_t>(bin) - 1]; }
  double upper(int bin) const { return thresholds[static_cast<std::size_t>(bin)]; }
};

inline QuantizerSpec make_midrise(unsigned bits, double interval) {
  require(bits >= 1 && bits <= 24, "make_midrise: bits must lie in [1, 24]");
  require(interval > 0.0, "make_midrise: interval must be positive");
  QuantizerSpec q;
  q.bits = bits;
  q.interval = interval;
  const long count = 1L << bits;
  const long half = count / 2;
  q.thresholds.resize(static_cast<std::size_t>(count) + 1);
  q.thresholds.front() = -normal::kInf;
  q.thresholds.back() = normal::kInf;
  for (long b = 1; b < count; ++b) q.thresholds[static_cast<std::size_t>(b)] = static_cast<double>(b - half) * interval;
  // Level r_b - interval/2; the top bin takes the same spacing instead of an
  // infinite level.
  q.levels.resize(static_cast<std::size_t>(count));
  for (long b = 1; b <= count; ++b)
    q.levels[static_cast<std::size_t>(b) - 1] = (static_cast<double>(b - half) - 0.5) * interval;
  return q;
}

inline QuantizerSpec identity_quantizer() {
  QuantizerSpec q;
  q.identity = true;
  return q;
}

/// Step size for a uniform quantizer of a N(0, signal_std^2) input: the
/// MSE-optimal uniform step up to 5 bits, then a range of +-6 std.
inline double default_midrise_interval(unsigned bits, double signal_std) {
  static constexpr double kOptimal[] = {0.0, 1.596, 0.9957, 0.5860, 0.3352, 0.1881};
  if (bits >= 1 && bits <= 5) return kOptimal[bits] * signal_std;
  return 12.0 * signal_std / static_cast<double>(1UL << bits);
}

struct QuantizeResult {
  Vector levels;
  std::vector<int> bins;
};

inline int bin_of(const QuantizerSpec& spec, double u) {
  const auto first = spec.thresholds.begin() + 1;
  const auto last = spec.thresholds.end() - 1;
  return 1 + static_cast<int>(std::lower_bound(first, last, u) - first);
}

inline QuantizeResult quantize(const QuantizerSpec& spec, std::span<const double> u) {
  require(!spec.is_identity(), "quantize: identity quantizer has no bins");
  QuantizeResult out{Vector(u.size()), std::vector<int>(u.size())};
  for (std::size_t i = 0; i < u.size(); ++i) {
    const int b = bin_of(spec, u[i]);
    out.bins[i] = b;
    out.levels[i] = spec.levels[static_cast<std::size_t>(b) - 1];
  }
  return out;
}

/// y = Q(A x + n). For the identity quantizer `observations` carries A x + n
/// and `bins` is empty.
struct QuantizedModel {
  MeasurementOperator op;
  std::vector<int> bins;
  QuantizerSpec spec;
  double noise_variance;
  Vector observations;

  void validate() const {
    require(noise_variance >= 0.0, "QuantizedModel: noise_variance must be nonnegative");
    if (spec.is_identity()) {
      require_same_size(observations.size(), op.n_rows(), "QuantizedModel observations");
      return;
    }
    require_same_size(bins.size(), op.n_rows(), "QuantizedModel bins");
    for (int b : bins)
      require(b >= 1 && static_cast<std::size_t>(b) <= spec.bin_count(), "QuantizedModel: bin index out of range");
  }
};

inline QuantizedModel sample_quantized_model(const MeasurementOperator& op, std::span<const double> x_true,
                                             double noise_variance, const QuantizerSpec& spec, std::uint64_t seed) {
  LinearModel lin = sample_model(op, x_true, noise_variance, seed);
  QuantizedModel qm{op, {}, spec, noise_variance, {}};
  if (spec.is_identity()) {
    qm.observations = std::move(lin.observations);
  } else {
    qm.bins = quantize(spec, lin.observations).bins;
  }
  return qm;
}

/// Posterior moments of z ~ N(z_pri, v_pri) given z + N(0, noise) in (lo, hi].
inline PosteriorMoments truncated_posterior(double lo, double hi, double z_pri, double v_pri, double noise_variance) {
  const double total = v_pri + noise_variance;
  const double s = std::sqrt(total);
  const auto t = normal::truncated_moments((lo - z_pri) / s, (hi - z_pri) / s);
  const double gain = v_pri / total;
  return {z_pri + gain * s * t.mean, gain * noise_variance + gain * v_pri * t.variance};
}

/// Module C: componentwise MMSE dequantization, variance averaged over m.
inline Message dequantize_mmse(const QuantizedModel& qm, const Message& z_pri) {
  require_same_size(z_pri.mean.size(), qm.op.n_rows(), "dequantize_mmse prior");
  if (!(z_pri.variance > 0.0)) throw InvalidArgument("dequantize_mmse: prior variance must be positive");
  const double v = z_pri.variance;
  const std::size_t m = z_pri.mean.size();
  Message post{Vector(m), 0.0};
  if (qm.spec.is_identity()) {
    const double d2 = qm.noise_variance;
    for (std::size_t i = 0; i < m; ++i) post.mean[i] = (z_pri.mean[i] * d2 + qm.observations[i] * v) / (v + d2);
    post.variance = v * d2 / (v + d2);
    return post;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int b = qm.bins[i];
    const auto pm = truncated_posterior(qm.spec.lower(b), qm.spec.upper(b), z_pri.mean[i], v, qm.noise_variance);
    post.mean[i] = pm.mean;
    acc += pm.variance;
  }
  post.variance = acc / static_cast<double>(m);
  return post;
}

struct QstmpConfig {
  StmpConfig base;
  std::size_t inner_iters = 1;  // module A/B sweeps per module-C update
  double min_ext_variance = 1e-12;
  double max_post_ratio = 1.0 - 1e-9;  // v_C^post cap relative to v_C^pri
};

/// Q-STMP: dequantizer (C) feeding pseudo-measurements to the A/B turbo loop.
template <Denoiser D>
RunResult run_qstmp(const QuantizedModel& qm, D& denoise, const QstmpConfig& qcfg,
                    std::optional<std::span<const double>> ground_truth = std::nullopt) {
  const StmpConfig& cfg = qcfg.base;
  cfg.validate();
  qm.validate();
  require(qcfg.inner_iters >= 1, "QstmpConfig: inner_iters must be >= 1");
  const std::size_t n = qm.op.n_cols();
  if (ground_truth) require_same_size(ground_truth->size(), n, "run_qstmp ground truth");

  detail::TurboState st;
  st.a_pri = detail::initial_message(cfg, n);
  Message c_pri{qm.op.forward(st.a_pri.mean), st.a_pri.variance};

  RunResult result;
  Vector previous;
  for (std::size_t t = 1; t <= cfg.max_iters; ++t) {
    const auto start = std::chrono::steady_clock::now();
    IterationRecord rec;
    rec.v_C_pri = c_pri.variance;

    Message c_post = dequantize_mmse(qm, c_pri);
    c_post.variance = std::clamp(c_post.variance, 1e-300, qcfg.max_post_ratio * c_pri.variance);
    Message c_ext = extrinsic(c_post, c_pri);
    c_ext.variance = std::max(c_ext.variance, qcfg.min_ext_variance);
    rec.v_C_ext = c_ext.variance;

    DenoiserOutput out;
    for (std::size_t k = 0; k < qcfg.inner_iters; ++k)
      out = detail::turbo_sweep(qm.op, c_ext.mean, c_ext.variance, denoise, st, cfg, rec);

    c_pri = Message{qm.op.forward(st.a_pri.mean), st.a_pri.variance};

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

inline RunResult run_qstmp(const QuantizedModel& qm, const Prior& prior, QstmpConfig qcfg,
                           std::optional<std::span<const double>> ground_truth = std::nullopt) {
  if (!(qcfg.base.init_variance > 0.0)) qcfg.base.init_variance = prior.second_moment();
  TweedieDenoiser denoiser{prior, qcfg.base.clamp};
  return run_qstmp(qm, denoiser, qcfg, ground_truth);
}

}  // namespace stmp
