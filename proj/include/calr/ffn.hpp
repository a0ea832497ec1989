#pragma once

// Gated feed-forward blocks: the dense original and its compressed
// replacement. The compressed form factors each projection through a
// rank-r pair and can carry an additive corrective path, either a dense
// low-rank pair applied to the block input or a masked sparse matrix.

#include <optional>
#include <string>

#include "calr/error.hpp"
#include "calr/matrix.hpp"
#include "calr/nn_ops.hpp"
#include "calr/svd.hpp"

namespace calr {

struct GatedFfn {
  Matrix w_g;  // d_model x d_ff
  Matrix w_u;  // d_model x d_ff
  Matrix w_d;  // d_ff x d_model

  int d_model() const { return w_g.rows(); }
  int d_ff() const { return w_g.cols(); }
};

/// [(X Wg) ⊙ SiLU(X Wu)] Wd
inline Matrix ffn_forward(const GatedFfn& ffn, const Matrix& x) {
  if (x.cols() != ffn.d_model()) {
    throw Error(ErrorCode::kShapeMismatch,
                "ffn_forward: input " + x.shape_str() + " vs d_model " +
                    std::to_string(ffn.d_model()));
  }
  Matrix gate = matmul(x, ffn.w_g);
  Matrix up = silu(matmul(x, ffn.w_u));
  return matmul(hadamard(gate, up), ffn.w_d);
}

enum class CompressionMode { kCalr, kSvdOnly, kSvdFixed };

enum class CorrectiveKind { kNone, kDense, kSparse };

inline std::string to_string(CompressionMode m) {
  switch (m) {
    case CompressionMode::kCalr: return "calr";
    case CompressionMode::kSvdOnly: return "svd_only";
    case CompressionMode::kSvdFixed: return "svd_fixed";
  }
  return "?";
}

inline std::string to_string(CorrectiveKind k) {
  switch (k) {
    case CorrectiveKind::kNone: return "none";
    case CorrectiveKind::kDense: return "dense";
    case CorrectiveKind::kSparse: return "sparse";
  }
  return "?";
}

inline CompressionMode compression_mode_from_string(const std::string& s) {
  if (s == "calr") return CompressionMode::kCalr;
  if (s == "svd_only") return CompressionMode::kSvdOnly;
  if (s == "svd_fixed") return CompressionMode::kSvdFixed;
  throw Error(ErrorCode::kBadConfig, "unknown compression mode: " + s);
}

inline CorrectiveKind corrective_kind_from_string(const std::string& s) {
  if (s == "none") return CorrectiveKind::kNone;
  if (s == "dense") return CorrectiveKind::kDense;
  if (s == "sparse") return CorrectiveKind::kSparse;
  throw Error(ErrorCode::kBadConfig, "unknown corrective kind: " + s);
}

/// Trainable pair whose product is added to the compressed path's output.
/// b starts at exactly zero so the path is initially inert.
struct CorrectiveModule {
  Matrix a;  // d_in x r_c
  Matrix b;  // r_c x d_out
  int rank = 0;

  int param_count() const { return static_cast<int>(a.size() + b.size()); }
};

/// Masked dense matrix standing in for a sparse corrective term. Entries
/// outside the mask are structurally zero.
struct SparseCorrective {
  Matrix s;     // d_in x d_out
  Matrix mask;  // same shape, entries 0 or 1
  double density = 0.0;

  int nonzero_count() const {
    int count = 0;
    for (size_t i = 0; i < mask.size(); ++i)
      if (mask.data()[i] != 0.0) ++count;
    return count;
  }
};

struct CompressedFfn {
  LowRankPair g;  // factors of w_g
  LowRankPair u;  // factors of w_u
  LowRankPair d;  // factors of w_d
  CompressionMode mode = CompressionMode::kCalr;
  CorrectiveKind corrective_kind = CorrectiveKind::kNone;
  std::optional<CorrectiveModule> corrective;
  std::optional<SparseCorrective> sparse;

  int d_model() const { return g.a.rows(); }
  int d_ff() const { return g.b.cols(); }

  int param_count() const {
    int total = g.param_count() + u.param_count() + d.param_count();
    if (corrective) total += corrective->param_count();
    if (sparse) total += sparse->nonzero_count();
    return total;
  }
};

/// The factored primary path alone: [(X AgBg) ⊙ SiLU(X AuBu)] AdBd.
inline Matrix svd_ffn_forward(const CompressedFfn& ffn, const Matrix& x) {
  if (x.cols() != ffn.d_model()) {
    throw Error(ErrorCode::kShapeMismatch,
                "svd_ffn_forward: input " + x.shape_str() + " vs d_model " +
                    std::to_string(ffn.d_model()));
  }
  Matrix gate = matmul(matmul(x, ffn.g.a), ffn.g.b);
  Matrix up = silu(matmul(matmul(x, ffn.u.a), ffn.u.b));
  return matmul(matmul(hadamard(gate, up), ffn.d.a), ffn.d.b);
}

/// Corrective path on its own: X(AB) for the dense kind, X S for the sparse
/// kind, zero contribution in svd_only / svd_fixed modes.
inline Matrix corrective_forward(const CompressedFfn& ffn, const Matrix& x) {
  if (ffn.mode != CompressionMode::kCalr) {
    return Matrix(x.rows(), ffn.d.b.cols());
  }
  if (ffn.corrective) {
    return matmul(matmul(x, ffn.corrective->a), ffn.corrective->b);
  }
  if (ffn.sparse) {
    return matmul(x, ffn.sparse->s);
  }
  return Matrix(x.rows(), ffn.d.b.cols());
}

/// Full compressed forward: primary path plus corrective path.
inline Matrix calr_forward(const CompressedFfn& ffn, const Matrix& x) {
  Matrix primary = svd_ffn_forward(ffn, x);
  if (ffn.mode != CompressionMode::kCalr) return primary;
  if (ffn.corrective) {
    return add(primary, matmul(matmul(x, ffn.corrective->a), ffn.corrective->b));
  }
  if (ffn.sparse) {
    return add(primary, matmul(x, ffn.sparse->s));
  }
  return primary;
}

/// A single compressed projection (used for attention q/k/v): X(AB) plus an
/// optional dense corrective pair.
struct CompressedLinear {
  LowRankPair w;
  CompressionMode mode = CompressionMode::kCalr;
  std::optional<CorrectiveModule> corrective;

  int param_count() const {
    return w.param_count() + (corrective ? corrective->param_count() : 0);
  }
};

inline Matrix compressed_linear_forward(const CompressedLinear& lin, const Matrix& x) {
  Matrix out = matmul(matmul(x, lin.w.a), lin.w.b);
  if (lin.mode == CompressionMode::kCalr && lin.corrective) {
    out = add(out, matmul(matmul(x, lin.corrective->a), lin.corrective->b));
  }
  return out;
}

}  // namespace calr
