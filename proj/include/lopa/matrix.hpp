#pragma once

// Dense row-major matrices plus the elementwise/structural kernels the rest
// of the library is written against. Everything is templated on the scalar
// type: double for gradient-verification paths, float for the wire/serving
// path. Problem sizes are small, so kernels favour clarity over blocking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace lopa {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class MatrixT {
  static_assert(std::is_floating_point_v<T>, "MatrixT requires a floating-point scalar");

 public:
  MatrixT() = default;
  MatrixT(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T{0}) {}
  MatrixT(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " + shape_str());
  }
  MatrixT(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged initializer for matrix");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static MatrixT identity(std::size_t n) {
    MatrixT m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }
  static MatrixT filled(std::size_t rows, std::size_t cols, T value) {
    MatrixT m(rows, cols);
    std::fill(m.data_.begin(), m.data_.end(), value);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(const MatrixT& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  friend bool operator==(const MatrixT& a, const MatrixT& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = MatrixT<double>;
using MatrixF = MatrixT<float>;

namespace detail {
inline void throw_shape(const std::string& op, const std::string& a, const std::string& b) {
  throw ShapeError(op + ": incompatible shapes " + a + " and " + b);
}
}  // namespace detail

/// Standard matrix product. Inner loops run over contiguous rows of b.
template <typename T>
MatrixT<T> matmul(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (a.cols() != b.rows()) detail::throw_shape("matmul", a.shape_str(), b.shape_str());
  MatrixT<T> out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const T aval = pa[i * k + l];
      if (aval == T{0}) continue;
      const T* brow = pb + l * m;
      T* orow = po + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aval * brow[j];
    }
  }
  return out;
}

template <typename T>
MatrixT<T> transpose(const MatrixT<T>& a) {
  MatrixT<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
MatrixT<T> add(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (!a.same_shape(b)) detail::throw_shape("add", a.shape_str(), b.shape_str());
  MatrixT<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

template <typename T>
MatrixT<T> sub(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (!a.same_shape(b)) detail::throw_shape("sub", a.shape_str(), b.shape_str());
  MatrixT<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

template <typename T>
MatrixT<T> scale(const MatrixT<T>& a, T s) {
  MatrixT<T> out = a;
  for (T& v : out.data()) v *= s;
  return out;
}

/// Elementwise product.
template <typename T>
MatrixT<T> hadamard(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (!a.same_shape(b)) detail::throw_shape("hadamard", a.shape_str(), b.shape_str());
  MatrixT<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

template <typename T>
MatrixT<T> elem_max(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (!a.same_shape(b)) detail::throw_shape("elem_max", a.shape_str(), b.shape_str());
  MatrixT<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::max(out.data()[i], b.data()[i]);
  return out;
}

/// Numerically stable logistic; sigmoid(0) is exactly 0.5.
template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) {
    const T e = std::exp(-x);
    return T{1} / (T{1} + e);
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
MatrixT<T> sigmoid(const MatrixT<T>& a) {
  MatrixT<T> out = a;
  for (T& v : out.data()) v = sigmoid_scalar(v);
  return out;
}

template <typename T>
MatrixT<T> tanh_elem(const MatrixT<T>& a) {
  MatrixT<T> out = a;
  for (T& v : out.data()) v = std::tanh(v);
  return out;
}

template <typename T>
MatrixT<T> relu(const MatrixT<T>& a) {
  MatrixT<T> out = a;
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

/// Row-wise softmax with per-row max subtraction, so huge logits cannot
/// overflow. Each output row is nonnegative and sums to 1.
template <typename T>
MatrixT<T> softmax_rows(const MatrixT<T>& a) {
  if (a.rows() > 0 && a.cols() == 0) throw ShapeError("softmax_rows: rows of width zero");
  MatrixT<T> out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
    T sum = T{0};
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const T e = std::exp(a(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= sum;
  }
  return out;
}

/// Columns of a followed by columns of b. Either side may have zero columns.
template <typename T>
MatrixT<T> concat_cols(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (a.cols() == 0 && a.rows() == 0) return b;
  if (b.cols() == 0 && b.rows() == 0) return a;
  if (a.rows() != b.rows()) detail::throw_shape("concat_cols", a.shape_str(), b.shape_str());
  MatrixT<T> out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
  }
  return out;
}

/// Rows of a followed by rows of b (used to stack head outputs).
template <typename T>
MatrixT<T> stack_rows(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (a.rows() == 0 && a.cols() == 0) return b;
  if (b.rows() == 0 && b.cols() == 0) return a;
  if (a.cols() != b.cols()) detail::throw_shape("stack_rows", a.shape_str(), b.shape_str());
  MatrixT<T> out(a.rows() + b.rows(), a.cols());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

/// Columns [c0, c1) as a new matrix.
template <typename T>
MatrixT<T> slice_cols(const MatrixT<T>& a, std::size_t c0, std::size_t c1) {
  if (c0 > c1 || c1 > a.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of " +
                     a.shape_str());
  MatrixT<T> out(a.rows(), c1 - c0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = a(i, j);
  return out;
}

template <typename T>
MatrixT<T> column(const MatrixT<T>& a, std::size_t j) {
  return slice_cols(a, j, j + 1);
}

template <typename T>
void set_col(MatrixT<T>& a, std::size_t j, const MatrixT<T>& col) {
  if (col.rows() != a.rows() || col.cols() != 1) detail::throw_shape("set_col", a.shape_str(), col.shape_str());
  for (std::size_t i = 0; i < a.rows(); ++i) a(i, j) = col(i, 0);
}

/// Column vector holding the sum over columns of each row.
template <typename T>
MatrixT<T> sum_cols(const MatrixT<T>& a) {
  MatrixT<T> out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T s = T{0};
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
    out(i, 0) = s;
  }
  return out;
}

template <typename T>
MatrixT<T> mean_cols(const MatrixT<T>& a) {
  if (a.cols() == 0) throw ShapeError("mean_cols: matrix has no columns");
  return scale(sum_cols(a), T{1} / static_cast<T>(a.cols()));
}

template <typename T>
T frobenius_norm(const MatrixT<T>& a) {
  T s = T{0};
  for (T v : a.data()) s += v * v;
  return std::sqrt(s);
}

template <typename T>
T max_abs_diff(const MatrixT<T>& a, const MatrixT<T>& b) {
  if (!a.same_shape(b)) detail::throw_shape("max_abs_diff", a.shape_str(), b.shape_str());
  T m = T{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

template <typename To, typename From>
MatrixT<To> cast_matrix(const MatrixT<From>& a) {
  MatrixT<To> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = static_cast<To>(a.data()[i]);
  return out;
}

/// Relative closeness with an absolute floor for near-zero entries.
template <typename T>
bool allclose(const MatrixT<T>& a, const MatrixT<T>& b, T rel, T abs_floor = T{0}) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T x = a.data()[i], y = b.data()[i];
    const T diff = std::abs(x - y);
    const T bound = std::max(abs_floor, rel * std::max(std::abs(x), std::abs(y)));
    if (diff > bound) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Deterministic PRNG.
//
// The integer stream is mt19937_64, whose output sequence is fixed by the
// standard, so a seed reproduces identically on every platform. Uniform and
// normal variates are derived here (53-bit mantissa scaling, polar
// Box-Muller) rather than via std::*_distribution, whose streams are
// implementation-defined.
// ---------------------------------------------------------------------------
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64 + polar Box-Muller";

  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return state_(); }

  /// Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ShapeError("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return mean + stddev * u * f;
  }

  /// Stream splitter: a child seed that is decorrelated from the parent
  /// stream (splitmix64 finalizer over seed ^ tag).
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Matrix with i.i.d. normal entries, filled in row-major order.
template <typename T>
MatrixT<T> random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
  MatrixT<T> out(rows, cols);
  for (auto& v : out.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return out;
}

template <typename T>
MatrixT<T> random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo = 0.0, double hi = 1.0) {
  MatrixT<T> out(rows, cols);
  for (auto& v : out.data()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return out;
}

// ---------------------------------------------------------------------------
// Singular values via one-sided Jacobi, accurate enough for the numerical
// rank checks used throughout (matrices here are at most a few hundred wide).
// ---------------------------------------------------------------------------
inline std::vector<double> singular_values(const Matrix& input) {
  // Work on the orientation with rows >= cols; singular values are shared.
  Matrix a = input.rows() >= input.cols() ? input : transpose(input);
  const std::size_t n = a.cols();
  if (n == 0 || a.rows() == 0) return {};

  const double eps = 1e-14;
  for (int sweep = 0; sweep < 64; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) {
          app += a(i, p) * a(i, p);
          aqq += a(i, q) * a(i, q);
          apq += a(i, p) * a(i, q);
        }
        if (std::abs(apq) <= eps * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < a.rows(); ++i) {
          const double vp = a(i, p), vq = a(i, q);
          a(i, p) = c * vp - s * vq;
          a(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, j) * a(i, j);
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

/// Count of singular values above rel_tol times the largest one.
inline std::size_t numerical_rank(const Matrix& a, double rel_tol = 1e-9) {
  const auto sv = singular_values(a);
  if (sv.empty() || sv.front() == 0.0) return 0;
  const double cut = rel_tol * sv.front();
  std::size_t r = 0;
  for (double s : sv)
    if (s > cut) ++r;
  return r;
}

}  // namespace lopa
