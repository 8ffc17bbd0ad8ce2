#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "stmp/core.hpp"

namespace stmp {

enum class TransformKind { dct, hadamard };

inline std::string to_string(TransformKind kind) {
  return kind == TransformKind::dct ? "dct" : "hadamard";
}

inline TransformKind parse_transform_kind(const std::string& s) {
  if (s == "dct") return TransformKind::dct;
  if (s == "hadamard") return TransformKind::hadamard;
  throw InvalidArgument("unknown transform kind '" + s + "'");
}

constexpr bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

namespace detail {

// FFTW planning is not thread-safe; execution of an existing plan on new
// arrays is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class DctPlans {
 public:
  explicit DctPlans(std::size_t n) : n_(n) {
    std::vector<double> in(n), out(n);
    std::lock_guard lock(fftw_planner_mutex());
    const int len = static_cast<int>(n);
    forward_ = fftw_plan_r2r_1d(len, in.data(), out.data(), FFTW_REDFT10,
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
    inverse_ = fftw_plan_r2r_1d(len, in.data(), out.data(), FFTW_REDFT01,
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (!forward_ || !inverse_) throw Error("fftw: failed to create DCT plans");
  }
  DctPlans(const DctPlans&) = delete;
  DctPlans& operator=(const DctPlans&) = delete;
  ~DctPlans() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }

  // Orthonormal DCT-II.
  void dct2(std::span<const double> in, std::span<double> out) const {
    std::vector<double> src(in.begin(), in.end());
    fftw_execute_r2r(forward_, src.data(), out.data());
    const double c0 = std::sqrt(1.0 / n_) / 2.0;
    const double ck = std::sqrt(2.0 / n_) / 2.0;
    out[0] *= c0;
    for (std::size_t k = 1; k < n_; ++k) out[k] *= ck;
  }

  // Orthonormal DCT-III, the transpose (and inverse) of dct2.
  void dct3(std::span<const double> in, std::span<double> out) const {
    std::vector<double> src(in.begin(), in.end());
    src[0] *= std::sqrt(1.0 / n_);
    const double ck = std::sqrt(2.0 / n_) / 2.0;
    for (std::size_t k = 1; k < n_; ++k) src[k] *= ck;
    fftw_execute_r2r(inverse_, src.data(), out.data());
  }

 private:
  std::size_t n_;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

// In-place orthonormal Walsh-Hadamard transform (Sylvester ordering).
inline void hadamard_inplace(std::span<double> a) {
  const std::size_t n = a.size();
  for (std::size_t len = 1; len < n; len <<= 1) {
    for (std::size_t i = 0; i < n; i += len << 1) {
      for (std::size_t j = i; j < i + len; ++j) {
        const double u = a[j];
        const double v = a[j + len];
        a[j] = u + v;
        a[j + len] = u - v;
      }
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (auto& v : a) v *= scale;
}

}  // namespace detail

/// Partial-orthogonal operator A = S W Theta: random signs, an orthonormal
/// transform, then a random subset of M rows. A A^T = I.
class MeasurementOperator {
 public:
  MeasurementOperator(std::size_t n_rows, std::size_t n_cols, TransformKind kind, std::uint64_t seed)
      : n_rows_(n_rows), n_cols_(n_cols), kind_(kind), seed_(seed) {
    if (n_rows < 1 || n_rows > n_cols)
      throw InvalidArgument("make_operator: need 1 <= n_rows <= n_cols (got " +
                            std::to_string(n_rows) + " x " + std::to_string(n_cols) + ")");
    if (kind == TransformKind::hadamard && !is_power_of_two(n_cols))
      throw InvalidArgument("make_operator: hadamard requires n_cols to be a power of two");

    Rng rng(seed);
    std::vector<std::size_t> perm(n_cols);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = 0; i < n_rows; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n_cols - 1);
      std::swap(perm[i], perm[pick(rng)]);
    }
    selected_rows_.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_rows));

    signs_.resize(n_cols);
    std::bernoulli_distribution coin(0.5);
    for (auto& s : signs_) s = coin(rng) ? 1.0 : -1.0;

    if (kind == TransformKind::dct) plans_ = std::make_shared<const detail::DctPlans>(n_cols);
  }

  std::size_t n_rows() const { return n_rows_; }
  std::size_t n_cols() const { return n_cols_; }
  TransformKind transform_kind() const { return kind_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<std::size_t>& selected_rows() const { return selected_rows_; }
  const std::vector<double>& signs() const { return signs_; }
  double sampling_ratio() const { return static_cast<double>(n_rows_) / static_cast<double>(n_cols_); }

  /// y = S W Theta x.
  Vector forward(std::span<const double> x) const {
    require_same_size(x.size(), n_cols_, "forward");
    Vector t(n_cols_);
    for (std::size_t i = 0; i < n_cols_; ++i) t[i] = signs_[i] * x[i];
    Vector w(n_cols_);
    transform(t, w);
    Vector y(n_rows_);
    for (std::size_t m = 0; m < n_rows_; ++m) y[m] = w[selected_rows_[m]];
    return y;
  }

  /// x = Theta W^T S^T u.
  Vector adjoint(std::span<const double> u) const {
    require_same_size(u.size(), n_rows_, "adjoint");
    Vector z(n_cols_, 0.0);
    for (std::size_t m = 0; m < n_rows_; ++m) z[selected_rows_[m]] = u[m];
    Vector x(n_cols_);
    transform_transposed(z, x);
    for (std::size_t i = 0; i < n_cols_; ++i) x[i] *= signs_[i];
    return x;
  }

 private:
  void transform(std::span<const double> in, std::span<double> out) const {
    if (kind_ == TransformKind::dct) {
      plans_->dct2(in, out);
    } else {
      std::copy(in.begin(), in.end(), out.begin());
      detail::hadamard_inplace(out);
    }
  }

  void transform_transposed(std::span<const double> in, std::span<double> out) const {
    if (kind_ == TransformKind::dct) {
      plans_->dct3(in, out);
    } else {
      std::copy(in.begin(), in.end(), out.begin());
      detail::hadamard_inplace(out);
    }
  }

  std::size_t n_rows_;
  std::size_t n_cols_;
  TransformKind kind_;
  std::uint64_t seed_;
  std::vector<std::size_t> selected_rows_;
  std::vector<double> signs_;
  std::shared_ptr<const detail::DctPlans> plans_;
};

inline MeasurementOperator make_operator(std::size_t n_rows, std::size_t n_cols, TransformKind kind,
                                         std::uint64_t seed) {
  return MeasurementOperator(n_rows, n_cols, kind, seed);
}

/// y = A x + n with n ~ N(0, noise_variance I).
struct LinearModel {
  MeasurementOperator op;
  Vector observations;
  double noise_variance;

  LinearModel(MeasurementOperator o, Vector y, double noise_var)
      : op(std::move(o)), observations(std::move(y)), noise_variance(noise_var) {
    require_same_size(observations.size(), op.n_rows(), "LinearModel observations");
    require(noise_variance >= 0.0, "LinearModel: noise_variance must be nonnegative");
  }
};

inline LinearModel sample_model(const MeasurementOperator& op, std::span<const double> x_true,
                                double noise_variance, std::uint64_t seed) {
  require(noise_variance >= 0.0, "sample_model: noise_variance must be nonnegative");
  Vector y = op.forward(x_true);
  if (noise_variance > 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, std::sqrt(noise_variance));
    for (auto& v : y) v += normal(rng);
  }
  return LinearModel(op, std::move(y), noise_variance);
}

}  // namespace stmp
