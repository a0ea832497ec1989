#include "calr/svd.hpp"

#include <gtest/gtest.h>

#include <algorithm>

#include "calr/rng.hpp"

using namespace calr;

namespace {

// Independent oracle: two-sided Jacobi eigen-solver on the symmetric matrix
// W^T W. Singular values of W are the square roots of its eigenvalues.
std::vector<double> singular_values_via_eigen_oracle(const Matrix& w) {
  Matrix g = matmul(transpose(w), w);
  const int n = g.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        off = std::max(off, std::abs(g(p, q)));
        if (std::abs(g(p, q)) < 1e-14) continue;
        double theta = 0.5 * std::atan2(2.0 * g(p, q), g(q, q) - g(p, p));
        double c = std::cos(theta), s = std::sin(theta);
        for (int k = 0; k < n; ++k) {
          double gpk = g(p, k), gqk = g(q, k);
          g(p, k) = c * gpk - s * gqk;
          g(q, k) = s * gpk + c * gqk;
        }
        for (int k = 0; k < n; ++k) {
          double gkp = g(k, p), gkq = g(k, q);
          g(k, p) = c * gkp - s * gkq;
          g(k, q) = s * gkp + c * gkq;
        }
      }
    }
    if (off < 1e-14) break;
  }
  std::vector<double> eig(n);
  for (int i = 0; i < n; ++i) eig[i] = std::sqrt(std::max(0.0, g(i, i)));
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

void expect_valid_svd(const Matrix& w, const SvdResult& r, double tol = 1e-8) {
  const int k = std::min(w.rows(), w.cols());
  ASSERT_EQ(static_cast<int>(r.s.size()), k);
  ASSERT_EQ(r.u.rows(), w.rows());
  ASSERT_EQ(r.u.cols(), k);
  ASSERT_EQ(r.vt.rows(), k);
  ASSERT_EQ(r.vt.cols(), w.cols());
  for (int i = 0; i + 1 < k; ++i) EXPECT_GE(r.s[i], r.s[i + 1]);
  for (double v : r.s) EXPECT_GE(v, 0.0);
  EXPECT_LE(max_abs_diff(matmul_tn(r.u, r.u), Matrix::identity(k)), tol);
  EXPECT_LE(max_abs_diff(matmul_nt(r.vt, r.vt), Matrix::identity(k)), tol);
  double scale = std::max(1.0, frobenius_norm(w));
  EXPECT_LE(frobenius_norm(sub(reconstruct(r), w)) / scale, tol);
}

Matrix random_rank_pair_product(Rng& rng, int m, int n, int r) {
  Matrix a = rng.gaussian_matrix(m, r, 1.0);
  Matrix b = rng.gaussian_matrix(r, n, 1.0);
  return matmul(a, b);
}

}  // namespace

TEST(Svd, IdentitySingularValues) {
  SvdResult r = svd(Matrix::identity(4));
  for (double s : r.s) EXPECT_NEAR(s, 1.0, 1e-12);
  expect_valid_svd(Matrix::identity(4), r);
}

TEST(Svd, DiagonalCase) {
  Matrix w = Matrix::from({{3, 0, 0}, {0, 2, 0}, {0, 0, 1}});
  SvdResult r = svd(w);
  EXPECT_NEAR(r.s[0], 3.0, 1e-12);
  EXPECT_NEAR(r.s[1], 2.0, 1e-12);
  EXPECT_NEAR(r.s[2], 1.0, 1e-12);
  expect_valid_svd(w, r);
}

TEST(Svd, MatchesEigenOracle) {
  Rng rng(31);
  Matrix w = rng.gaussian_matrix(8, 6, 1.0);
  SvdResult r = svd(w);
  std::vector<double> expected = singular_values_via_eigen_oracle(w);
  ASSERT_EQ(expected.size(), r.s.size());
  for (size_t i = 0; i < expected.size(); ++i)
    EXPECT_NEAR(r.s[i], expected[i], 1e-8);
}

TEST(Svd, InvariantsAcrossAspectRatios) {
  Rng rng(37);
  for (auto [m, n] : {std::pair{9, 5}, std::pair{6, 6}, std::pair{4, 11}}) {
    for (int trial = 0; trial < 8; ++trial) {
      Matrix w = rng.gaussian_matrix(m, n, 1.0);
      expect_valid_svd(w, svd(w));
    }
  }
}

TEST(Svd, RankDeficientAndZeroInput) {
  Rng rng(41);
  Matrix low = random_rank_pair_product(rng, 7, 5, 2);
  expect_valid_svd(low, svd(low));

  Matrix zero(5, 3);
  SvdResult r = svd(zero);
  for (double s : r.s) EXPECT_EQ(s, 0.0);
  expect_valid_svd(zero, r);
}

TEST(Svd, DeterministicAcrossCalls) {
  Rng rng(43);
  Matrix w = rng.gaussian_matrix(10, 7, 1.0);
  SvdResult a = svd(w);
  SvdResult b = svd(w);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.s, b.s);
  EXPECT_EQ(a.vt, b.vt);
}

TEST(Svd, RejectsBadInput) {
  EXPECT_THROW(svd(Matrix()), Error);
  Matrix bad = Matrix::from({{1, 2}, {3, 4}});
  bad(1, 1) = std::numeric_limits<double>::infinity();
  try {
    svd(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(Truncate, DropsTrailingSingularValue) {
  Matrix w = Matrix::from({{3, 0, 0}, {0, 2, 0}, {0, 0, 1}});
  LowRankPair pair = truncate(svd(w), 2);
  EXPECT_NEAR(frobenius_norm(sub(w, reconstruct(pair))), 1.0, 1e-10);
}

TEST(Truncate, FullRankReconstructs) {
  Rng rng(47);
  Matrix w = rng.gaussian_matrix(6, 9, 1.0);
  LowRankPair pair = truncate(svd(w), 6);
  EXPECT_LE(frobenius_norm(sub(w, reconstruct(pair))) / frobenius_norm(w), 1e-8);
}

TEST(Truncate, RankOutOfRange) {
  Matrix w = Matrix::identity(3);
  SvdResult r = svd(w);
  try {
    truncate(r, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRankOutOfRange);
  }
  EXPECT_THROW(truncate(r, 0), Error);
}

TEST(Truncate, BeatsRandomCompetitors) {
  Rng rng(53);
  Matrix w = rng.gaussian_matrix(10, 6, 1.0);
  LowRankPair pair = truncate(svd(w), 3);
  double err = frobenius_norm(sub(w, reconstruct(pair)));
  for (int trial = 0; trial < 1000; ++trial) {
    Matrix competitor = random_rank_pair_product(rng, 10, 6, 3);
    EXPECT_LE(err, frobenius_norm(sub(w, competitor)) + 1e-12);
  }
}

// Truncation error equals the tail of the spectrum and beats random rank-r
// competitors for every rank, on matrices across shapes.
TEST(Truncate, OptimalityPropertySweep) {
  Rng rng(59);
  for (int trial = 0; trial < 100; ++trial) {
    int m = 2 + static_cast<int>(rng.index(15));
    int n = 2 + static_cast<int>(rng.index(15));
    Matrix w = rng.gaussian_matrix(m, n, 1.0);
    SvdResult r = svd(w);
    int k = static_cast<int>(r.s.size());
    int rank = 1 + static_cast<int>(rng.index(k));
    LowRankPair pair = truncate(r, rank);
    double err = frobenius_norm(sub(w, reconstruct(pair)));

    double tail = 0.0;
    for (int i = rank; i < k; ++i) tail += r.s[i] * r.s[i];
    tail = std::sqrt(tail);
    double denom = std::max(1e-12, frobenius_norm(w));
    EXPECT_NEAR(err / denom, tail / denom, 1e-8);

    for (int c = 0; c < 20; ++c) {
      Matrix competitor = random_rank_pair_product(rng, m, n, rank);
      EXPECT_LE(err, frobenius_norm(sub(w, competitor)) + 1e-12);
    }
  }
}
