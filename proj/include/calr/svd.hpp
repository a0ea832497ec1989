#pragma once

// Singular value decomposition via one-sided Jacobi (cyclic sweeps) and the
// rank-r truncation used to initialize compressed projections. Deterministic:
// fixed sweep order, stable descending sort, and a sign convention that makes
// each left singular vector's largest-magnitude entry positive.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "calr/error.hpp"
#include "calr/matrix.hpp"

namespace calr {

struct SvdResult {
  Matrix u;               // m x k, orthonormal columns
  std::vector<double> s;  // length k, descending, non-negative
  Matrix vt;              // k x n, orthonormal rows
};

/// Factor pair approximating a matrix at a fixed rank: W ~= a * b.
struct LowRankPair {
  Matrix a;  // m x r
  Matrix b;  // r x n
  int rank = 0;

  int param_count() const {
    return static_cast<int>(a.size() + b.size());
  }
};

namespace detail {

constexpr int kJacobiMaxSweeps = 60;
constexpr double kJacobiTol = 1e-12;

// One-sided Jacobi on a tall-or-square matrix (m >= n). Columns of `a` are
// rotated until mutually orthogonal; `v` accumulates the rotations.
inline double jacobi_orthogonalize(Matrix& a, Matrix& v) {
  const int m = a.rows(), n = a.cols();
  double off = 0.0;
  for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
    off = 0.0;
    for (int i = 0; i < n - 1; ++i) {
      for (int j = i + 1; j < n; ++j) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int r = 0; r < m; ++r) {
          double ai = a(r, i), aj = a(r, j);
          alpha += ai * ai;
          beta += aj * aj;
          gamma += ai * aj;
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        double coupling = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, coupling);
        if (gamma == 0.0) continue;
        double zeta = (beta - alpha) / (2.0 * gamma);
        double t = std::copysign(1.0, zeta) /
                   (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (int r = 0; r < m; ++r) {
          double ai = a(r, i), aj = a(r, j);
          a(r, i) = c * ai - s * aj;
          a(r, j) = s * ai + c * aj;
        }
        for (int r = 0; r < n; ++r) {
          double vi = v(r, i), vj = v(r, j);
          v(r, i) = c * vi - s * vj;
          v(r, j) = s * vi + c * vj;
        }
      }
    }
    if (off < kJacobiTol) return off;
  }
  if (off >= kJacobiTol) {
    throw Error(ErrorCode::kSvdNonConvergence,
                "svd: Jacobi sweeps exhausted, max off-diagonal coupling " +
                    std::to_string(off));
  }
  return off;
}

// Fill null-space columns of U with an orthonormal completion so U^T U = I
// even for rank-deficient input. Candidates are canonical basis vectors,
// tried in index order.
inline void complete_basis(Matrix& u, int from_col) {
  const int m = u.rows(), k = u.cols();
  int next_candidate = 0;
  for (int c = from_col; c < k; ++c) {
    std::vector<double> col(m, 0.0);
    double nrm = 0.0;
    while (next_candidate < m) {
      std::fill(col.begin(), col.end(), 0.0);
      col[next_candidate] = 1.0;
      ++next_candidate;
      for (int prev = 0; prev < c; ++prev) {
        double proj = 0.0;
        for (int r = 0; r < m; ++r) proj += col[r] * u(r, prev);
        for (int r = 0; r < m; ++r) col[r] -= proj * u(r, prev);
      }
      nrm = 0.0;
      for (double x : col) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > 0.5) break;
    }
    for (int r = 0; r < m; ++r) u(r, c) = col[r] / nrm;
  }
}

}  // namespace detail

/// Full thin SVD, k = min(m, n). Wide inputs are factored through their
/// transpose.
inline SvdResult svd(const Matrix& w) {
  if (w.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "svd: empty matrix");
  }
  if (!all_finite(w)) {
    throw Error(ErrorCode::kInvalidArgument, "svd: non-finite input");
  }
  const bool transposed = w.rows() < w.cols();
  Matrix a = transposed ? transpose(w) : w;
  const int m = a.rows(), n = a.cols();

  Matrix v = Matrix::identity(n);
  detail::jacobi_orthogonalize(a, v);

  std::vector<double> sigma(n, 0.0);
  for (int j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int r = 0; r < m; ++r) acc += a(r, j) * a(r, j);
    sigma[j] = std::sqrt(acc);
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return sigma[x] > sigma[y]; });

  Matrix u(m, n);
  Matrix vn(n, n);
  std::vector<double> s(n, 0.0);
  double sigma_max = sigma.empty() ? 0.0 : sigma[order[0]];
  int valid = 0;
  for (int c = 0; c < n; ++c) {
    int src = order[c];
    s[c] = sigma[src];
    for (int r = 0; r < n; ++r) vn(r, c) = v(r, src);
    if (sigma[src] > 1e-300 && sigma[src] > sigma_max * 1e-15) {
      for (int r = 0; r < m; ++r) u(r, c) = a(r, src) / sigma[src];
      valid = c + 1;
    }
  }
  detail::complete_basis(u, valid);
  for (int c = valid; c < n; ++c) s[c] = 0.0;

  // Sign convention: largest-|entry| of each left singular vector positive.
  for (int c = 0; c < n; ++c) {
    int arg = 0;
    double best = 0.0;
    for (int r = 0; r < m; ++r) {
      double mag = std::abs(u(r, c));
      if (mag > best) {
        best = mag;
        arg = r;
      }
    }
    if (u(arg, c) < 0.0) {
      for (int r = 0; r < m; ++r) u(r, c) = -u(r, c);
      for (int r = 0; r < n; ++r) vn(r, c) = -vn(r, c);
    }
  }

  SvdResult out;
  out.s = std::move(s);
  if (transposed) {
    out.u = vn;             // (w.rows) x k
    out.vt = transpose(u);  // k x (w.cols)
  } else {
    out.u = u;
    out.vt = transpose(vn);
  }
  return out;
}

/// Rank-r truncation with the square-root split of the singular values:
/// a = U_r * sqrt(S_r), b = sqrt(S_r) * Vt_r.
inline LowRankPair truncate(const SvdResult& svd_result, int r) {
  const int k = static_cast<int>(svd_result.s.size());
  if (r < 1 || r > k) {
    throw Error(ErrorCode::kRankOutOfRange,
                "truncate: rank " + std::to_string(r) + " outside [1, " +
                    std::to_string(k) + "]");
  }
  const int m = svd_result.u.rows();
  const int n = svd_result.vt.cols();
  LowRankPair pair;
  pair.rank = r;
  pair.a = Matrix(m, r);
  pair.b = Matrix(r, n);
  for (int c = 0; c < r; ++c) {
    double root = std::sqrt(svd_result.s[c]);
    for (int i = 0; i < m; ++i) pair.a(i, c) = svd_result.u(i, c) * root;
    for (int j = 0; j < n; ++j) pair.b(c, j) = root * svd_result.vt(c, j);
  }
  return pair;
}

inline Matrix reconstruct(const LowRankPair& pair) { return matmul(pair.a, pair.b); }

inline Matrix reconstruct(const SvdResult& r) {
  Matrix us = r.u;
  for (int c = 0; c < static_cast<int>(r.s.size()); ++c)
    for (int i = 0; i < us.rows(); ++i) us(i, c) *= r.s[c];
  return matmul(us, r.vt);
}

}  // namespace calr
