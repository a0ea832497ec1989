#pragma once

// Toy decoder-only language model: byte-level vocabulary, pre-norm blocks
// with causal attention and a gated FFN, RMS norms, and an output projection
// tied to the token embedding. Blocks hold either the dense FFN or its
// compressed replacement; attention projections can likewise be swapped for
// factored versions.

#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "calr/corpus.hpp"
#include "calr/error.hpp"
#include "calr/ffn.hpp"
#include "calr/matrix.hpp"
#include "calr/nn_ops.hpp"
#include "calr/rng.hpp"

namespace calr {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 8;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 256;
  int max_seq_len = 128;
  uint64_t seed = 1;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        vocab_size < 1 || max_seq_len < 1) {
      throw Error(ErrorCode::kBadConfig, "model config: dimensions must be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw Error(ErrorCode::kBadConfig,
                  "model config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
    }
  }
};

using FfnSlot = std::variant<GatedFfn, CompressedFfn>;
using ProjSlot = std::variant<Matrix, CompressedLinear>;

struct TransformerBlock {
  ProjSlot wq, wk, wv;  // each d_model x d_model (or factored)
  Matrix wo;            // d_model x d_model
  Matrix norm_attn;     // 1 x d_model
  Matrix norm_ffn;      // 1 x d_model
  FfnSlot ffn;

  bool ffn_compressed() const {
    return std::holds_alternative<CompressedFfn>(ffn);
  }
  bool qkv_compressed() const {
    return std::holds_alternative<CompressedLinear>(wq);
  }
};

struct TransformerModel {
  ModelConfig config;
  Matrix embedding;  // vocab_size x d_model; output projection is its transpose
  std::vector<TransformerBlock> blocks;
  Matrix final_norm;  // 1 x d_model
};

inline Matrix projection_forward(const ProjSlot& slot, const Matrix& x) {
  if (const Matrix* w = std::get_if<Matrix>(&slot)) return matmul(x, *w);
  return compressed_linear_forward(std::get<CompressedLinear>(slot), x);
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

constexpr double kInitStd = 0.02;

inline TransformerModel init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x6d6f64));
  TransformerModel model;
  model.config = config;
  model.embedding = rng.gaussian_matrix(config.vocab_size, config.d_model, kInitStd);
  model.blocks.resize(config.n_layers);
  for (auto& block : model.blocks) {
    block.wq = rng.gaussian_matrix(config.d_model, config.d_model, kInitStd);
    block.wk = rng.gaussian_matrix(config.d_model, config.d_model, kInitStd);
    block.wv = rng.gaussian_matrix(config.d_model, config.d_model, kInitStd);
    block.wo = rng.gaussian_matrix(config.d_model, config.d_model, kInitStd);
    GatedFfn ffn;
    ffn.w_g = rng.gaussian_matrix(config.d_model, config.d_ff, kInitStd);
    ffn.w_u = rng.gaussian_matrix(config.d_model, config.d_ff, kInitStd);
    ffn.w_d = rng.gaussian_matrix(config.d_ff, config.d_model, kInitStd);
    block.ffn = std::move(ffn);
    block.norm_attn = Matrix(1, config.d_model);
    block.norm_attn.fill(1.0);
    block.norm_ffn = Matrix(1, config.d_model);
    block.norm_ffn.fill(1.0);
  }
  model.final_norm = Matrix(1, config.d_model);
  model.final_norm.fill(1.0);
  return model;
}

// ---------------------------------------------------------------------------
// Forward pass (inference path)
// ---------------------------------------------------------------------------

/// Activations recorded per block when taps are requested. `block_*` bracket
/// the whole block, `ffn_*` bracket the FFN sub-block (its residual branch),
/// and `ffn_normed_in` is the input to the FFN module proper, after the
/// pre-norm.
struct BlockTaps {
  Matrix block_in;
  Matrix block_out;
  Matrix ffn_in;
  Matrix ffn_out;
  Matrix ffn_normed_in;
};

struct ForwardResult {
  Matrix logits;  // (batch * seq_len) x vocab_size
  std::vector<BlockTaps> taps;
};

/// Multi-head causal attention over a (batch*seq_len) x d_model activation
/// matrix that is already normalized. Shared shape logic for eval; the tape
/// forward mirrors the same sequence of kernels.
inline Matrix attention_forward(const TransformerBlock& block, const Matrix& xn,
                                int batch, int seq_len, int n_heads) {
  const int d_model = xn.cols();
  const int head_dim = d_model / n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Matrix q = projection_forward(block.wq, xn);
  Matrix k = projection_forward(block.wk, xn);
  Matrix v = projection_forward(block.wv, xn);

  Matrix ctx(xn.rows(), d_model);
  for (int s = 0; s < batch; ++s) {
    const int row0 = s * seq_len;
    for (int h = 0; h < n_heads; ++h) {
      const int col0 = h * head_dim;
      Matrix qs = slice(q, row0, seq_len, col0, head_dim);
      Matrix ks = slice(k, row0, seq_len, col0, head_dim);
      Matrix vs = slice(v, row0, seq_len, col0, head_dim);
      Matrix probs = causal_softmax(scale(matmul_nt(qs, ks), inv_sqrt_dh));
      paste(ctx, matmul(probs, vs), row0, col0);
    }
  }
  return matmul(ctx, block.wo);
}

inline Matrix ffn_slot_forward(const FfnSlot& slot, const Matrix& xn) {
  if (const GatedFfn* dense = std::get_if<GatedFfn>(&slot)) {
    return ffn_forward(*dense, xn);
  }
  return calr_forward(std::get<CompressedFfn>(slot), xn);
}

inline ForwardResult forward(const TransformerModel& model,
                             const CalibrationBatch& batch,
                             bool want_taps = false) {
  const ModelConfig& cfg = model.config;
  if (batch.seq_len > cfg.max_seq_len) {
    throw Error(ErrorCode::kInvalidArgument,
                "forward: seq_len " + std::to_string(batch.seq_len) +
                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  ForwardResult result;
  Matrix x = gather_rows(model.embedding, batch.ids);
  for (const TransformerBlock& block : model.blocks) {
    BlockTaps taps;
    if (want_taps) taps.block_in = x;

    Matrix xn = rms_norm(x, block.norm_attn);
    Matrix attn = attention_forward(block, xn, batch.batch, batch.seq_len,
                                    cfg.n_heads);
    x = add(x, attn);

    if (want_taps) taps.ffn_in = x;
    Matrix fn = rms_norm(x, block.norm_ffn);
    if (want_taps) taps.ffn_normed_in = fn;
    x = add(x, ffn_slot_forward(block.ffn, fn));

    if (want_taps) {
      taps.ffn_out = x;
      taps.block_out = x;
      result.taps.push_back(std::move(taps));
    }
  }
  Matrix xf = rms_norm(x, model.final_norm);
  result.logits = matmul_nt(xf, model.embedding);
  return result;
}

/// Mean cross-entropy over all predicted positions. Targets are the inputs
/// shifted left by one, flattened row-major.
inline double lm_loss(const Matrix& logits, std::span<const int32_t> targets) {
  return cross_entropy_mean(logits, targets);
}

// ---------------------------------------------------------------------------
// Tensor enumeration (single source of truth for serialization and counting)
// ---------------------------------------------------------------------------

template <typename Fn>
void visit_tensors(TransformerModel& model, Fn&& fn) {
  fn("embedding", model.embedding);
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    TransformerBlock& block = model.blocks[i];
    std::string prefix = "blocks." + std::to_string(i) + ".";
    auto visit_proj = [&](const char* name, ProjSlot& slot) {
      if (Matrix* w = std::get_if<Matrix>(&slot)) {
        fn(prefix + "attn." + name, *w);
      } else {
        CompressedLinear& lin = std::get<CompressedLinear>(slot);
        fn(prefix + "attn." + name + ".a", lin.w.a);
        fn(prefix + "attn." + name + ".b", lin.w.b);
        if (lin.corrective) {
          fn(prefix + "attn." + name + ".corr.a", lin.corrective->a);
          fn(prefix + "attn." + name + ".corr.b", lin.corrective->b);
        }
      }
    };
    visit_proj("wq", block.wq);
    visit_proj("wk", block.wk);
    visit_proj("wv", block.wv);
    fn(prefix + "attn.wo", block.wo);
    fn(prefix + "norm_attn", block.norm_attn);
    fn(prefix + "norm_ffn", block.norm_ffn);
    if (GatedFfn* dense = std::get_if<GatedFfn>(&block.ffn)) {
      fn(prefix + "ffn.w_g", dense->w_g);
      fn(prefix + "ffn.w_u", dense->w_u);
      fn(prefix + "ffn.w_d", dense->w_d);
    } else {
      CompressedFfn& comp = std::get<CompressedFfn>(block.ffn);
      fn(prefix + "ffn.g.a", comp.g.a);
      fn(prefix + "ffn.g.b", comp.g.b);
      fn(prefix + "ffn.u.a", comp.u.a);
      fn(prefix + "ffn.u.b", comp.u.b);
      fn(prefix + "ffn.d.a", comp.d.a);
      fn(prefix + "ffn.d.b", comp.d.b);
      if (comp.corrective) {
        fn(prefix + "ffn.corr.a", comp.corrective->a);
        fn(prefix + "ffn.corr.b", comp.corrective->b);
      }
      if (comp.sparse) {
        fn(prefix + "ffn.sparse.s", comp.sparse->s);
        fn(prefix + "ffn.sparse.mask", comp.sparse->mask);
      }
    }
  }
  fn("final_norm", model.final_norm);
}

template <typename Fn>
void visit_tensors(const TransformerModel& model, Fn&& fn) {
  visit_tensors(const_cast<TransformerModel&>(model),
                [&fn](const std::string& name, Matrix& tensor) {
                  fn(name, static_cast<const Matrix&>(tensor));
                });
}

}  // namespace calr
