#pragma once

// Dense row-major matrix of 64-bit reals plus the arithmetic kernels shared
// by the inference and training paths. Every kernel fixes the summation
// order per output element, so results are bit-identical across runs and
// across thread counts.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "calr/error.hpp"

namespace calr {

class Matrix {
 public:
  Matrix() = default;

  Matrix(int rows, int cols)
      : rows_(rows), cols_(cols),
        data_(static_cast<size_t>(rows) * static_cast<size_t>(cols), 0.0) {
    if (rows < 0 || cols < 0) {
      throw Error(ErrorCode::kInvalidArgument, "Matrix: negative dimensions");
    }
  }

  Matrix(int rows, int cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols)) {
      throw Error(ErrorCode::kShapeMismatch,
                  "Matrix: data length " + std::to_string(data_.size()) +
                      " does not match " + std::to_string(rows) + "x" +
                      std::to_string(cols));
    }
  }

  static Matrix from(std::initializer_list<std::initializer_list<double>> rows) {
    int m = static_cast<int>(rows.size());
    int n = m > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    Matrix out(m, n);
    int i = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != n) {
        throw Error(ErrorCode::kShapeMismatch, "Matrix::from: ragged rows");
      }
      int j = 0;
      for (double v : row) out(i, j++) = v;
      ++i;
    }
    return out;
  }

  static Matrix identity(int n) {
    Matrix out(n, n);
    for (int i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(int i, int j) noexcept {
    return data_[static_cast<size_t>(i) * cols_ + j];
  }
  double operator()(int i, int j) const noexcept {
    return data_[static_cast<size_t>(i) * cols_ + j];
  }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double* row(int i) noexcept { return data_.data() + static_cast<size_t>(i) * cols_; }
  const double* row(int i) const noexcept {
    return data_.data() + static_cast<size_t>(i) * cols_;
  }
  std::span<const double> row_span(int i) const noexcept {
    return {row(i), static_cast<size_t>(cols_)};
  }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Matrix& other) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Thread configuration. Parallelism splits output rows between threads; the
// per-element accumulation order never changes, so any thread count yields
// the same bits.
// ---------------------------------------------------------------------------

inline std::atomic<int>& thread_count_storage() {
  static std::atomic<int> count{1};
  return count;
}

inline int num_threads() { return thread_count_storage().load(); }

inline void set_num_threads(int n) { thread_count_storage().store(n < 1 ? 1 : n); }

namespace detail {

template <typename Fn>
void parallel_rows(int rows, Fn&& body) {
  int nt = num_threads();
  if (nt <= 1 || rows < 64) {
    body(0, rows);
    return;
  }
  nt = std::min(nt, rows);
  std::vector<std::thread> workers;
  workers.reserve(nt);
  int chunk = (rows + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    int lo = t * chunk;
    int hi = std::min(rows, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& w : workers) w.join();
}

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::kShapeMismatch, std::string(op) + ": " +
                                               a.shape_str() + " vs " +
                                               b.shape_str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products
// ---------------------------------------------------------------------------

/// C = A * B. i-k-j loop: each C(i,j) accumulates over k in ascending order.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::kShapeMismatch,
                "matmul: " + a.shape_str() + " * " + b.shape_str());
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Matrix c(m, n);
  detail::parallel_rows(m, [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      double* ci = c.row(i);
      const double* ai = a.row(i);
      for (int p = 0; p < k; ++p) {
        const double aip = ai[p];
        const double* bp = b.row(p);
        for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  });
  return c;
}

/// C = A * B^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorCode::kShapeMismatch,
                "matmul_nt: " + a.shape_str() + " * " + b.shape_str() + "^T");
  }
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Matrix c(m, n);
  detail::parallel_rows(m, [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      const double* ai = a.row(i);
      double* ci = c.row(i);
      for (int j = 0; j < n; ++j) {
        const double* bj = b.row(j);
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] = acc;
      }
    }
  });
  return c;
}

/// C = A^T * B without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw Error(ErrorCode::kShapeMismatch,
                "matmul_tn: " + a.shape_str() + "^T * " + b.shape_str());
  }
  const int m = a.cols(), k = a.rows(), n = b.cols();
  Matrix c(m, n);
  // k is the outer loop so C streams sequentially; per element the order is
  // still ascending k.
  for (int p = 0; p < k; ++p) {
    const double* ap = a.row(p);
    const double* bp = b.row(p);
    for (int i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c.row(i);
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Matrix add(const Matrix& a, const Matrix& b) {
  detail::check_same_shape(a, b, "add");
  Matrix out(a.rows(), a.cols());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  detail::check_same_shape(a, b, "sub");
  Matrix out(a.rows(), a.cols());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  detail::check_same_shape(a, b, "hadamard");
  Matrix out(a.rows(), a.cols());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out(a.rows(), a.cols());
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  return out;
}

inline void add_in_place(Matrix& a, const Matrix& b) {
  detail::check_same_shape(a, b, "add_in_place");
  for (size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

// ---------------------------------------------------------------------------
// Block access
// ---------------------------------------------------------------------------

inline Matrix slice(const Matrix& m, int r0, int rows, int c0, int cols) {
  if (r0 < 0 || c0 < 0 || r0 + rows > m.rows() || c0 + cols > m.cols()) {
    throw Error(ErrorCode::kShapeMismatch,
                "slice: block " + std::to_string(r0) + "+" + std::to_string(rows) +
                    "," + std::to_string(c0) + "+" + std::to_string(cols) +
                    " outside " + m.shape_str());
  }
  Matrix out(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const double* src = m.row(r0 + i) + c0;
    double* dst = out.row(i);
    for (int j = 0; j < cols; ++j) dst[j] = src[j];
  }
  return out;
}

inline void paste(Matrix& m, const Matrix& block, int r0, int c0) {
  if (r0 < 0 || c0 < 0 || r0 + block.rows() > m.rows() ||
      c0 + block.cols() > m.cols()) {
    throw Error(ErrorCode::kShapeMismatch,
                "paste: block " + block.shape_str() + " at " + std::to_string(r0) +
                    "," + std::to_string(c0) + " outside " + m.shape_str());
  }
  for (int i = 0; i < block.rows(); ++i) {
    const double* src = block.row(i);
    double* dst = m.row(r0 + i) + c0;
    for (int j = 0; j < block.cols(); ++j) dst[j] = src[j];
  }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (size_t i = 0; i < m.size(); ++i) acc += m.data()[i] * m.data()[i];
  return std::sqrt(acc);
}

inline double max_abs(const Matrix& m) {
  double acc = 0.0;
  for (size_t i = 0; i < m.size(); ++i) acc = std::max(acc, std::abs(m.data()[i]));
  return acc;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  detail::check_same_shape(a, b, "max_abs_diff");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    acc = std::max(acc, std::abs(a.data()[i] - b.data()[i]));
  return acc;
}

inline bool all_finite(const Matrix& m) {
  for (size_t i = 0; i < m.size(); ++i)
    if (!std::isfinite(m.data()[i])) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Vector geometry
// ---------------------------------------------------------------------------

inline double dot(std::span<const double> x, std::span<const double> y) {
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

inline double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

/// 1 - cos(x, y), in [0, 2]. Throws on zero-norm input; callers that want a
/// skip policy catch kZeroNormVector.
inline double cosine_distance(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "cosine_distance: lengths " + std::to_string(x.size()) + " vs " +
                    std::to_string(y.size()));
  }
  double nx = norm2(x);
  double ny = norm2(y);
  if (nx == 0.0 || ny == 0.0) {
    throw Error(ErrorCode::kZeroNormVector, "cosine_distance: zero-norm input");
  }
  return 1.0 - dot(x, y) / (nx * ny);
}

}  // namespace calr
