#pragma once

#include <Eigen/Core>

#if defined(SKILLPROBE_LIBMVEC) && defined(__AVX2__)
#include <immintrin.h>
extern "C" __m256d _ZGVdN4v_erf(__m256d);
extern "C" __m256d _ZGVdN4v_exp(__m256d);
#define SKILLPROBE_VECTOR_MATH 1
#endif

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "skillprobe/errors.hpp"

namespace skillprobe {

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix of doubles. Storage is aligned to Eigen's maximum
/// alignment so vectorized kernels take the same path on every run.
class Matrix {
 public:
  using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, const std::vector<double>& values)
      : rows_(rows), cols_(cols), values_(values.begin(), values.end()) {
    if (values_.size() != rows_ * cols_)
      throw ShapeError("matrix value count " + std::to_string(values_.size()) +
                       " does not match shape " + std::to_string(rows) + "x" +
                       std::to_string(cols));
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      values_.insert(values_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  const Storage& values() const { return values_; }
  Storage& values() { return values_; }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Storage values_;
};

namespace detail {
using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
inline Eigen::Map<EigenRowMajor> view(Matrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline Eigen::Map<const EigenRowMajor> view(const Matrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline void require(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok)
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " +
                     b.shape_str());
}
}  // namespace detail

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.rows(), "matmul", a, b);
  Matrix out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  detail::view(out).noalias() = detail::view(a) * detail::view(b);
  return out;
}

/// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt", a, b);
  Matrix out(a.rows(), b.rows());
  if (a.cols() == 0) return out;
  detail::view(out).noalias() = detail::view(a) * detail::view(b).transpose();
  return out;
}

/// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  detail::require(a.rows() == b.rows(), "matmul_tn", a, b);
  Matrix out(a.cols(), b.cols());
  if (a.rows() == 0) return out;
  detail::view(out).noalias() = detail::view(a).transpose() * detail::view(b);
  return out;
}

/// out += a^T * b
inline void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  detail::require(a.rows() == b.rows(), "matmul_tn_acc", a, b);
  if (out.rows() != a.cols() || out.cols() != b.cols())
    throw ShapeError("matmul_tn_acc: accumulator " + out.shape_str() + " expected " +
                     std::to_string(a.cols()) + "x" + std::to_string(b.cols()));
  if (a.rows() == 0) return;
  detail::view(out).noalias() += detail::view(a).transpose() * detail::view(b);
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

/// Adds a 1 x cols bias row to every row of m.
inline void add_row_bias(Matrix& m, const Matrix& bias) {
  if (bias.size() != m.cols()) throw ShapeError("bias " + bias.shape_str() + " vs " + m.shape_str());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double* row = m.data() + r * m.cols();
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias[c];
  }
}

/// acc (1 x cols) += column sums of m.
inline void add_column_sums(const Matrix& m, Matrix& acc) {
  if (acc.size() != m.cols()) throw ShapeError("column-sum accumulator " + acc.shape_str());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double* row = m.data() + r * m.cols();
    for (std::size_t c = 0; c < m.cols(); ++c) acc[c] += row[c];
  }
}

inline void axpy(double alpha, const Matrix& x, Matrix& y) {
  if (!x.same_shape(y)) throw ShapeError("axpy: " + x.shape_str() + " vs " + y.shape_str());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return std::sqrt(s);
}

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

enum class Activation { gelu, relu };

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
         x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }

inline double activate(Activation f, double x) { return f == Activation::gelu ? gelu(x) : relu(x); }
inline double activate_grad(Activation f, double x) {
  return f == Activation::gelu ? gelu_grad(x) : relu_grad(x);
}

namespace detail {

/// out[i] = erf(x[i] * scale)
inline void erf_scaled(const double* x, double scale, double* out, std::size_t n) {
  std::size_t i = 0;
#ifdef SKILLPROBE_VECTOR_MATH
  const __m256d s = _mm256_set1_pd(scale);
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _ZGVdN4v_erf(_mm256_mul_pd(_mm256_loadu_pd(x + i), s)));
#endif
  for (; i < n; ++i) out[i] = std::erf(x[i] * scale);
}

/// x[i] = exp(x[i])
inline void exp_inplace(double* x, std::size_t n) {
  std::size_t i = 0;
#ifdef SKILLPROBE_VECTOR_MATH
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(x + i, _ZGVdN4v_exp(_mm256_loadu_pd(x + i)));
#endif
  for (; i < n; ++i) x[i] = std::exp(x[i]);
}

/// out[i] = exp(x[i]^2 * scale)
inline void exp_square_scaled(const double* x, double scale, double* out, std::size_t n) {
  std::size_t i = 0;
#ifdef SKILLPROBE_VECTOR_MATH
  const __m256d s = _mm256_set1_pd(scale);
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    _mm256_storeu_pd(out + i, _ZGVdN4v_exp(_mm256_mul_pd(_mm256_mul_pd(v, v), s)));
  }
#endif
  for (; i < n; ++i) out[i] = std::exp(x[i] * x[i] * scale);
}

}  // namespace detail

/// f applied elementwise; when `grad` is given it receives f'(x).
inline Matrix apply(Activation f, const Matrix& x, Matrix* grad = nullptr) {
  Matrix out(x.rows(), x.cols());
  if (grad) *grad = Matrix(x.rows(), x.cols());
  const std::size_t n = x.size();
  if (f == Activation::relu) {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = relu(x[i]);
      if (grad) (*grad)[i] = relu_grad(x[i]);
    }
    return out;
  }
  detail::erf_scaled(x.data(), kInvSqrt2, out.data(), n);
  if (grad) {
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    detail::exp_square_scaled(x.data(), -0.5, grad->data(), n);
    for (std::size_t i = 0; i < n; ++i)
      (*grad)[i] = 0.5 * (1.0 + out[i]) + x[i] * inv_sqrt_2pi * (*grad)[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * x[i] * (1.0 + out[i]);
  return out;
}

inline Matrix gelu(const Matrix& x) { return apply(Activation::gelu, x); }

inline Matrix gelu_grad(const Matrix& x) {
  Matrix grad;
  apply(Activation::gelu, x, &grad);
  return grad;
}

// ---------------------------------------------------------------------------
// SeededRng
// ---------------------------------------------------------------------------

/// Counter-based generator: the n-th draw of a stream is splitmix64 applied
/// to key + (n + 1) * golden, so draws are random-access and identical on
/// every platform. Streams derived from (seed, stream-id) get unrelated keys.
class SeededRng {
 public:
  static constexpr std::uint64_t golden = 0x9E3779B97F4A7C15ULL;

  explicit SeededRng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), key_(derive_key(seed, stream)) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  static constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream) {
    return mix(seed ^ mix(stream * golden + 0x632BE59BD9B4E019ULL));
  }
  static constexpr std::uint64_t at(std::uint64_t key, std::uint64_t counter) {
    return mix(key + (counter + 1) * golden);
  }
  static double unit(std::uint64_t bits) {  // [0, 1)
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
  }
  /// Standard normal at a fixed position of a keyed stream (Box-Muller).
  static double normal_at(std::uint64_t key, std::uint64_t index) {
    const double u1 = 1.0 - unit(at(key, 2 * index));  // (0, 1]
    const double u2 = unit(at(key, 2 * index + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64() { return at(key_, counter_++); }
  double uniform() { return unit(next_u64()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_at(key_, normal_counter_++ + (std::uint64_t{1} << 62)); }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Normal truncated at two standard deviations, rescaled so the draws
  /// have standard deviation `stddev`.
  double truncated_normal(double stddev) {
    constexpr double truncated_std = 0.8796256610342398;  // std of N(0,1) on [-2, 2]
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return z * stddev / truncated_std;
    }
  }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("SeededRng::below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      const std::uint64_t v = next_u64();
      if (v < limit) return v % n;
    }
  }
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream.
  SeededRng derive(std::uint64_t stream) const { return SeededRng(key_, stream); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::uint64_t normal_counter_ = 0;
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moment buffers are shaped on the first step and the
/// parameter list must keep the same shapes afterwards.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig config) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  AdamConfig& config() { return config_; }
  long step_count() const { return step_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
    if (params.size() != grads.size())
      throw ShapeError("adam: " + std::to_string(params.size()) + " params but " +
                       std::to_string(grads.size()) + " grads");
    if (m_.empty()) {
      for (const Matrix* p : params) {
        m_.emplace_back(p->rows(), p->cols());
        v_.emplace_back(p->rows(), p->cols());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("adam: parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(m_[i]))
        throw ShapeError("adam: parameter " + std::to_string(i) + " shape " +
                         params[i]->shape_str() + " vs gradient " + grads[i]->shape_str());
    }
    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = *params[i];
      const Matrix& g = *grads[i];
      Matrix& m = m_[i];
      Matrix& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        p[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

 private:
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long step_ = 0;
};

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Largest entrywise relative error between `analytic` and the central
/// difference of f around `params`. Denominators are floored at 1e-8.
/// `params` is perturbed in place and restored before returning.
inline double finite_diff_check(const std::function<double(const Matrix&)>& f, Matrix& params,
                                const Matrix& analytic, double h) {
  if (!params.same_shape(analytic))
    throw ShapeError("finite_diff_check: params " + params.shape_str() + " vs gradient " +
                     analytic.shape_str());
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double fp = f(params);
    params[i] = saved - h;
    const double fm = f(params);
    params[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError("finite_diff_check: objective is not finite at entry " +
                           std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace skillprobe
