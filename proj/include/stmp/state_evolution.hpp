#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stmp/core.hpp"
#include "stmp/denoisers.hpp"
#include "stmp/normal.hpp"
#include "stmp/priors.hpp"
#include "stmp/quadrature.hpp"
#include "stmp/quantizer.hpp"

namespace stmp {

namespace detail {

inline double mse_function_hermite(const Prior& prior, double v, int nodes) {
  double acc = 0.0;
  for (const auto& c : prior.components()) {
    const double sd = std::sqrt(c.variance + v);
    acc += c.weight * quadrature::standard_normal_expectation(
                          [&](double z) { return posterior_moments(prior, c.mean + sd * z, v).variance; }, nodes);
  }
  return acc;
}

inline double mse_function_adaptive(const Prior& prior, double v) {
  std::vector<double> breaks;
  for (const auto& c : prior.components()) {
    const double sd = std::sqrt(c.variance + v);
    for (double k : {-40.0, -16.0, -8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 40.0})
      breaks.push_back(c.mean + k * sd);
  }
  auto integrand = [&](double r) {
    double density = 0.0;
    for (const auto& c : prior.components()) {
      const double s = c.variance + v;
      const double d = r - c.mean;
      density += c.weight * std::exp(-0.5 * d * d / s) / std::sqrt(2.0 * std::numbers::pi * s);
    }
    return density == 0.0 ? 0.0 : density * posterior_moments(prior, r, v).variance;
  };
  return quadrature::integrate_piecewise(integrand, breaks, 1e-12).value;
}

}  // namespace detail

/// MSE(v) of the MMSE denoiser under r = x + N(0, v), i.e. the expected
/// posterior variance. Gauss-Hermite (201 nodes per mixture component), with
/// an adaptive fallback when a coarser rule disagrees.
inline double mse_function(const Prior& prior, double v) {
  if (!(v > 0.0)) throw InvalidArgument("mse_function: v must be positive");
  const double fine = detail::mse_function_hermite(prior, v, 201);
  const double coarse = detail::mse_function_hermite(prior, v, 151);
  if (std::abs(fine - coarse) <= 1e-10 * std::max(fine, 1e-300)) return fine;
  return detail::mse_function_adaptive(prior, v);
}

struct MseGridSpec {
  double v_min = 1e-6;
  int decades = 8;
  int points_per_decade = 64;

  std::vector<double> points() const {
    require(v_min > 0.0 && decades >= 1 && points_per_decade >= 1, "MseGridSpec: invalid grid");
    const int count = decades * points_per_decade + 1;
    std::vector<double> g(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) g[static_cast<std::size_t>(i)] = v_min * std::pow(10.0, static_cast<double>(i) / points_per_decade);
    return g;
  }
};

/// Lookup table v -> MSE(v), interpolated linearly in log-log space.
class MseTable {
 public:
  MseTable(std::vector<double> grid, std::vector<double> values, WarningSink warn = stderr_warnings())
      : grid_(std::move(grid)), values_(std::move(values)), warn_(std::move(warn)),
        out_of_range_(std::make_shared<std::atomic<std::size_t>>(0)) {
    require(grid_.size() >= 2 && grid_.size() == values_.size(), "MseTable: need >= 2 matching grid/value points");
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      require(grid_[i] > 0.0 && values_[i] > 0.0, "MseTable: grid and values must be positive");
      if (i) require(grid_[i] > grid_[i - 1], "MseTable: grid must be strictly increasing");
    }
  }

  const std::vector<double>& grid() const { return grid_; }
  const std::vector<double>& values() const { return values_; }
  std::size_t out_of_range_queries() const { return out_of_range_->load(); }
  void set_warning_sink(WarningSink warn) { warn_ = std::move(warn); }

  double operator()(double v) const {
    if (v <= grid_.front() || v >= grid_.back()) {
      const bool below = v < grid_.front();
      if (v != grid_.front() && v != grid_.back()) {
        out_of_range_->fetch_add(1);
        if (warn_)
          warn_("MseTable: query v=" + std::to_string(v) + (below ? " below" : " above") +
                " grid, clamped to boundary");
      }
      return below || v == grid_.front() ? values_.front() : values_.back();
    }
    const auto it = std::upper_bound(grid_.begin(), grid_.end(), v);
    const std::size_t hi = static_cast<std::size_t>(it - grid_.begin());
    const std::size_t lo = hi - 1;
    const double t = (std::log(v) - std::log(grid_[lo])) / (std::log(grid_[hi]) - std::log(grid_[lo]));
    return std::exp((1.0 - t) * std::log(values_[lo]) + t * std::log(values_[hi]));
  }

 private:
  std::vector<double> grid_;
  std::vector<double> values_;
  WarningSink warn_;
  std::shared_ptr<std::atomic<std::size_t>> out_of_range_;
};

/// Pool-adjacent-violators fit to a nondecreasing sequence.
inline std::vector<double> isotonic_nondecreasing(std::span<const double> y) {
  struct Block {
    double sum;
    std::size_t count;
  };
  std::vector<Block> blocks;
  for (double v : y) {
    blocks.push_back({v, 1});
    while (blocks.size() > 1) {
      auto& b = blocks[blocks.size() - 1];
      auto& a = blocks[blocks.size() - 2];
      if (a.sum / a.count <= b.sum / b.count) break;
      a.sum += b.sum;
      a.count += b.count;
      blocks.pop_back();
    }
  }
  std::vector<double> out;
  for (const auto& b : blocks) out.insert(out.end(), b.count, b.sum / b.count);
  return out;
}

namespace detail {

inline MseTable finish_table(std::vector<double> grid, std::vector<double> raw, WarningSink warn) {
  bool violated = false;
  for (std::size_t i = 1; i < raw.size(); ++i)
    if (raw[i] < raw[i - 1] * (1.0 - 1e-9)) violated = true;
  if (violated) {
    if (warn) warn("MseTable: raw MSE values not monotone; applying isotonic correction");
    raw = isotonic_nondecreasing(raw);
  } else {
    for (std::size_t i = 1; i < raw.size(); ++i) raw[i] = std::max(raw[i], raw[i - 1]);
  }
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = std::clamp(raw[i], 1e-300, grid[i] * (1.0 - 1e-12));
  return MseTable(std::move(grid), std::move(raw), std::move(warn));
}

}  // namespace detail

inline MseTable build_mse_table(const Prior& prior, const MseGridSpec& spec = {},
                                WarningSink warn = stderr_warnings()) {
  auto grid = spec.points();
  std::vector<double> raw(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) raw[i] = mse_function(prior, grid[i]);
  return detail::finish_table(std::move(grid), std::move(raw), std::move(warn));
}

/// Table for an arbitrary denoiser: at each grid point, denoise
/// `samples` draws x + N(0, v) with x from `prior` and average the error.
template <Denoiser D>
MseTable build_mse_table_monte_carlo(D& denoise, const Prior& prior, const MseGridSpec& spec, std::size_t samples,
                                     std::uint64_t seed, WarningSink warn = stderr_warnings()) {
  require(samples >= 1, "build_mse_table_monte_carlo: samples must be >= 1");
  auto grid = spec.points();
  std::vector<double> raw(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    const Vector x = prior.sample(samples, rng);
    Vector r = gaussian_vector(samples, grid[i], rng);
    for (std::size_t j = 0; j < samples; ++j) r[j] += x[j];
    const DenoiserOutput out = denoise(std::span<const double>(r), grid[i]);
    raw[i] = squared_distance(out.mean, x) / static_cast<double>(samples);
  }
  return detail::finish_table(std::move(grid), std::move(raw), std::move(warn));
}

struct SERecord {
  double v_A_pri;
  double v_B_pri;
  double predicted_mse;
  double v_C_ext = std::numeric_limits<double>::quiet_NaN();  // quantized SE only
};

struct SETrace {
  std::vector<SERecord> records;
  bool converged = false;
  bool diverged = false;
  double fixed_v_A = std::numeric_limits<double>::quiet_NaN();
  double fixed_v_B = std::numeric_limits<double>::quiet_NaN();
  double fixed_mse = std::numeric_limits<double>::quiet_NaN();
};

template <class F>
concept MseFunction = requires(const F& f, double v) {
  { f(v) } -> std::convertible_to<double>;
};

struct PriorMse {
  Prior prior;
  double operator()(double v) const { return mse_function(prior, v); }
};

struct SEOptions {
  std::size_t max_iters = 200;
  double tol = 1e-10;
  double divergence_ceiling = 1e12;  // v_B beyond this is treated as blow-up
};

namespace detail {

/// Shared recursion: v_A -> (v_B, v_C_ext) -> MSE(v_B) -> next v_A.
template <MseFunction F, class ToVB>
SETrace iterate_se(const F& mse, double v_a0, const SEOptions& opt, ToVB&& to_vb) {
  SETrace trace;
  double v_a = v_a0;
  for (std::size_t t = 0; t < opt.max_iters; ++t) {
    const auto [v_b, v_c_ext] = to_vb(v_a);
    if (!std::isfinite(v_b) || v_b > opt.divergence_ceiling) {
      trace.diverged = true;
      trace.records.push_back({v_a, v_b, std::numeric_limits<double>::quiet_NaN(), v_c_ext});
      return trace;
    }
    if (v_b <= 0.0) {
      // Fully determined system: the denoiser input is exact.
      trace.records.push_back({v_a, 0.0, 0.0, v_c_ext});
      trace.converged = true;
      trace.fixed_v_A = v_a;
      trace.fixed_v_B = 0.0;
      trace.fixed_mse = 0.0;
      return trace;
    }
    const double m = mse(v_b);
    trace.records.push_back({v_a, v_b, m, v_c_ext});
    if (!(m > 0.0) || m >= v_b) {
      if (m <= 0.0) {
        trace.converged = true;
        trace.fixed_v_A = v_a;
        trace.fixed_v_B = v_b;
        trace.fixed_mse = m;
      } else {
        trace.diverged = true;
      }
      return trace;
    }
    const double next = 1.0 / (1.0 / m - 1.0 / v_b);
    if (std::abs(next - v_a) <= opt.tol * v_a) {
      trace.converged = true;
      trace.fixed_v_A = next;
      trace.fixed_v_B = to_vb(next).first;
      trace.fixed_mse = mse(trace.fixed_v_B);
      return trace;
    }
    v_a = next;
  }
  return trace;
}

}  // namespace detail

/// STMP state evolution, started from v_A(0) = E[x^2] (passed in).
template <MseFunction F>
SETrace run_se_stmp(const F& mse, double sampling_ratio, double noise_variance, double v_a0,
                    const SEOptions& opt = {}) {
  require(sampling_ratio > 0.0 && sampling_ratio <= 1.0, "run_se_stmp: need 0 < M/N <= 1");
  require(noise_variance >= 0.0, "run_se_stmp: noise variance must be nonnegative");
  require(v_a0 > 0.0, "run_se_stmp: initial variance must be positive");
  return detail::iterate_se(mse, v_a0, opt, [&](double v_a) {
    return std::pair{(v_a + noise_variance) / sampling_ratio - v_a, noise_variance};
  });
}

inline SETrace run_se_stmp(const Prior& prior, double sampling_ratio, double noise_variance,
                           const SEOptions& opt = {}) {
  return run_se_stmp(PriorMse{prior}, sampling_ratio, noise_variance, prior.second_moment(), opt);
}

namespace detail {

/// Sum over bins of (Psi')^2 / Psi at one z-argument.
inline double theta_integrand(const QuantizerSpec& spec, double z, double total_var) {
  const double sd = std::sqrt(total_var);
  const int bins = static_cast<int>(spec.bin_count());
  const int home = bin_of(spec, z);
  double acc = 0.0;
  auto term = [&](int b) {
    const auto t = normal::truncated_moments((spec.lower(b) - z) / sd, (spec.upper(b) - z) / sd);
    acc += t.mean * t.mean * std::exp(t.log_mass) / total_var;
    return t.log_mass;
  };
  term(home);
  for (int b = home + 1; b <= bins; ++b)
    if (term(b) < -80.0) break;
  for (int b = home - 1; b >= 1; --b)
    if (term(b) < -80.0) break;
  return acc;
}

}  // namespace detail

struct ThetaOptions {
  int hermite_nodes = 127;
};

/// Fisher-information-type functional of module C:
/// sum over bins of the integral over Dz of (Psi')^2 / Psi with z-argument
/// sqrt(v_z - v_A) z and total variance v_A + noise.
inline double theta(double v_a, double noise_variance, const QuantizerSpec& spec, double v_z,
                    const ThetaOptions& opt = {}) {
  require(v_a > 0.0 || noise_variance > 0.0, "theta: v_A + noise must be positive");
  if (v_a > v_z) throw InvalidArgument("theta: need v_A <= v_z");
  const double total = v_a + noise_variance;
  if (spec.is_identity()) return 1.0 / total;
  if (spec.bin_count() == 1) return 0.0;
  const double spread = std::sqrt(v_z - v_a);
  if (spread == 0.0) return detail::theta_integrand(spec, 0.0, total);

  const double sd = std::sqrt(total);
  if (sd / spread < 0.25 && spec.bin_count() <= 64) {
    // Sharp bin edges in z: integrate piecewise between mapped thresholds.
    std::vector<double> breaks{-40.0, -12.0, 12.0, 40.0};
    for (std::size_t b = 1; b + 1 < spec.thresholds.size(); ++b) {
      const double zb = spec.thresholds[b] / spread;
      if (std::abs(zb) < 12.0) {
        for (double k : {-4.0, -1.0, 0.0, 1.0, 4.0}) breaks.push_back(std::clamp(zb + k * sd / spread, -12.0, 12.0));
      }
    }
    return quadrature::integrate_piecewise(
               [&](double z) { return normal::pdf(z) * detail::theta_integrand(spec, spread * z, total); }, breaks,
               1e-12)
        .value;
  }
  return quadrature::standard_normal_expectation(
      [&](double z) { return detail::theta_integrand(spec, spread * z, total); }, opt.hermite_nodes);
}

/// Q-STMP state evolution. v_A is capped at v_z (the prior carries no more
/// uncertainty than the measurement-domain signal energy).
template <MseFunction F>
SETrace run_se_qstmp(const F& mse, double sampling_ratio, double noise_variance, const QuantizerSpec& spec,
                     double v_z, const SEOptions& opt = {}, const ThetaOptions& topt = {}) {
  require(sampling_ratio > 0.0 && sampling_ratio <= 1.0, "run_se_qstmp: need 0 < M/N <= 1");
  require(noise_variance >= 0.0, "run_se_qstmp: noise variance must be nonnegative");
  require(v_z > 0.0, "run_se_qstmp: v_z must be positive");
  return detail::iterate_se(mse, v_z, opt, [&](double v_a) {
    v_a = std::min(v_a, v_z);
    const double th = theta(v_a, noise_variance, spec, v_z, topt);
    if (!(th > 0.0)) return std::pair{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    const double v_c_ext = std::max(1.0 / th - v_a, 1e-12);
    return std::pair{(v_a + v_c_ext) / sampling_ratio - v_a, v_c_ext};
  });
}

inline SETrace run_se_qstmp(const Prior& prior, double sampling_ratio, double noise_variance, const QuantizerSpec& spec,
                            const SEOptions& opt = {}) {
  return run_se_qstmp(PriorMse{prior}, sampling_ratio, noise_variance, spec, prior.second_moment(), opt);
}

}  // namespace stmp
