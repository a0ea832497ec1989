#pragma once

// Neural-net kernels shared by the inference forward pass and the gradient
// tape. Both paths call these exact functions, so eval and training produce
// bit-identical activations.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "calr/error.hpp"
#include "calr/matrix.hpp"

namespace calr {

constexpr double kRmsNormEps = 1e-5;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double silu(double x) { return x * sigmoid(x); }

inline double silu_derivative(double x) {
  double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

inline Matrix silu(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = silu(x.data()[i]);
  return out;
}

/// Row-wise RMS normalization with a learned 1 x d gain vector.
inline Matrix rms_norm(const Matrix& x, const Matrix& gain) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    throw Error(ErrorCode::kShapeMismatch,
                "rms_norm: gain " + gain.shape_str() + " for input " + x.shape_str());
  }
  const int n = x.cols();
  Matrix out(x.rows(), n);
  for (int i = 0; i < x.rows(); ++i) {
    const double* xi = x.row(i);
    double ms = 0.0;
    for (int j = 0; j < n; ++j) ms += xi[j] * xi[j];
    ms /= n;
    double inv = 1.0 / std::sqrt(ms + kRmsNormEps);
    double* oi = out.row(i);
    for (int j = 0; j < n; ++j) oi[j] = xi[j] * inv * gain(0, j);
  }
  return out;
}

/// Softmax over each row's causal prefix: row t attends to columns 0..t.
/// Entries beyond the prefix are exactly zero. Input must be square.
inline Matrix causal_softmax(const Matrix& scores) {
  if (scores.rows() != scores.cols()) {
    throw Error(ErrorCode::kShapeMismatch,
                "causal_softmax: expected square scores, got " + scores.shape_str());
  }
  const int t_len = scores.rows();
  Matrix out(t_len, t_len);
  for (int t = 0; t < t_len; ++t) {
    const double* si = scores.row(t);
    double m = si[0];
    for (int j = 1; j <= t; ++j) m = std::max(m, si[j]);
    double denom = 0.0;
    double* oi = out.row(t);
    for (int j = 0; j <= t; ++j) {
      oi[j] = std::exp(si[j] - m);
      denom += oi[j];
    }
    for (int j = 0; j <= t; ++j) oi[j] /= denom;
  }
  return out;
}

/// Rows of `table` selected by id: out.row(k) = table.row(ids[k]).
inline Matrix gather_rows(const Matrix& table, std::span<const int32_t> ids) {
  Matrix out(static_cast<int>(ids.size()), table.cols());
  for (size_t k = 0; k < ids.size(); ++k) {
    int32_t id = ids[k];
    if (id < 0 || id >= table.rows()) {
      throw Error(ErrorCode::kTokenOutOfRange,
                  "gather_rows: id " + std::to_string(id) + " outside [0, " +
                      std::to_string(table.rows()) + ")");
    }
    const double* src = table.row(id);
    double* dst = out.row(static_cast<int>(k));
    for (int j = 0; j < table.cols(); ++j) dst[j] = src[j];
  }
  return out;
}

/// Mean cross-entropy of row-wise logits against integer targets.
inline double cross_entropy_mean(const Matrix& logits,
                                 std::span<const int32_t> targets) {
  if (static_cast<size_t>(logits.rows()) != targets.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "cross_entropy_mean: " + std::to_string(logits.rows()) +
                    " rows vs " + std::to_string(targets.size()) + " targets");
  }
  const int v = logits.cols();
  double total = 0.0;
  for (int i = 0; i < logits.rows(); ++i) {
    const double* li = logits.row(i);
    int32_t t = targets[i];
    if (t < 0 || t >= v) {
      throw Error(ErrorCode::kTokenOutOfRange,
                  "cross_entropy_mean: target " + std::to_string(t));
    }
    double m = li[0];
    for (int j = 1; j < v; ++j) m = std::max(m, li[j]);
    double lse = 0.0;
    for (int j = 0; j < v; ++j) lse += std::exp(li[j] - m);
    total += m + std::log(lse) - li[t];
  }
  return total / logits.rows();
}

/// Row-wise softmax probabilities (dense, no mask); used by loss gradients.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  const int v = logits.cols();
  for (int i = 0; i < logits.rows(); ++i) {
    const double* li = logits.row(i);
    double* oi = out.row(i);
    double m = li[0];
    for (int j = 1; j < v; ++j) m = std::max(m, li[j]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j) {
      oi[j] = std::exp(li[j] - m);
      denom += oi[j];
    }
    for (int j = 0; j < v; ++j) oi[j] /= denom;
  }
  return out;
}

}  // namespace calr
