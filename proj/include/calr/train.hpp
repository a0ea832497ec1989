#pragma once

// Builds the language-model loss graph for a TransformerModel on a batch and
// runs the fine-tuning loop. The graph composes the same kernels in the same
// order as the inference forward, so recorded logits match eval logits bit
// for bit.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "calr/autodiff.hpp"
#include "calr/corpus.hpp"
#include "calr/error.hpp"
#include "calr/model.hpp"
#include "calr/optimizer.hpp"
#include "calr/params.hpp"

namespace calr {

/// Every tensor in the model, registered trainable.
inline ParamSet collect_all_params(TransformerModel& model) {
  ParamSet params;
  visit_tensors(model, [&params](const std::string& name, Matrix& tensor) {
    // The sparse mask is structural state, not a parameter.
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".mask") == 0) return;
    params.add(name, &tensor, /*trainable=*/true);
  });
  return params;
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

struct LossGraph {
  Tape tape;
  VarId loss = -1;
  VarId logits = -1;
  std::vector<std::pair<Param*, VarId>> leaves;
};

namespace detail {

class GraphBuilder {
 public:
  GraphBuilder(LossGraph& graph, ParamSet& params)
      : graph_(graph), params_(params) {}

  VarId leaf(const Matrix& weight) {
    auto it = cache_.find(&weight);
    if (it != cache_.end()) return it->second;
    Param* param = params_.find(&weight);
    VarId id = graph_.tape.leaf(weight, param != nullptr && param->trainable);
    cache_[&weight] = id;
    if (param != nullptr) graph_.leaves.emplace_back(param, id);
    return id;
  }

  VarId projection(const ProjSlot& slot, VarId x) {
    Tape& tape = graph_.tape;
    if (const Matrix* w = std::get_if<Matrix>(&slot)) {
      return tape.matmul(x, leaf(*w));
    }
    const CompressedLinear& lin = std::get<CompressedLinear>(slot);
    VarId out = tape.matmul(tape.matmul(x, leaf(lin.w.a)), leaf(lin.w.b));
    if (lin.mode == CompressionMode::kCalr && lin.corrective) {
      VarId corr = tape.matmul(tape.matmul(x, leaf(lin.corrective->a)),
                               leaf(lin.corrective->b));
      out = tape.add(out, corr);
    }
    return out;
  }

  VarId attention(const TransformerBlock& block, VarId xn, int batch,
                  int seq_len, int n_heads) {
    Tape& tape = graph_.tape;
    const int d_model = tape.value(xn).cols();
    const int head_dim = d_model / n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(head_dim));

    VarId q = projection(block.wq, xn);
    VarId k = projection(block.wk, xn);
    VarId v = projection(block.wv, xn);

    std::vector<VarId> seq_ctx;
    seq_ctx.reserve(batch);
    for (int s = 0; s < batch; ++s) {
      const int row0 = s * seq_len;
      std::vector<VarId> head_ctx;
      head_ctx.reserve(n_heads);
      for (int h = 0; h < n_heads; ++h) {
        const int col0 = h * head_dim;
        VarId qs = tape.slice(q, row0, seq_len, col0, head_dim);
        VarId ks = tape.slice(k, row0, seq_len, col0, head_dim);
        VarId vs = tape.slice(v, row0, seq_len, col0, head_dim);
        VarId probs =
            tape.causal_softmax(tape.scale(tape.matmul_nt(qs, ks), inv_sqrt_dh));
        head_ctx.push_back(tape.matmul(probs, vs));
      }
      seq_ctx.push_back(tape.concat_cols(head_ctx));
    }
    VarId ctx = batch == 1 ? seq_ctx[0] : tape.concat_rows(seq_ctx);
    return tape.matmul(ctx, leaf(block.wo));
  }

  VarId ffn(const FfnSlot& slot, VarId fn) {
    Tape& tape = graph_.tape;
    if (const GatedFfn* dense = std::get_if<GatedFfn>(&slot)) {
      VarId gate = tape.matmul(fn, leaf(dense->w_g));
      VarId up = tape.silu(tape.matmul(fn, leaf(dense->w_u)));
      return tape.matmul(tape.hadamard(gate, up), leaf(dense->w_d));
    }
    const CompressedFfn& comp = std::get<CompressedFfn>(slot);
    VarId gate = tape.matmul(tape.matmul(fn, leaf(comp.g.a)), leaf(comp.g.b));
    VarId up =
        tape.silu(tape.matmul(tape.matmul(fn, leaf(comp.u.a)), leaf(comp.u.b)));
    VarId primary = tape.matmul(tape.matmul(tape.hadamard(gate, up), leaf(comp.d.a)),
                                leaf(comp.d.b));
    if (comp.mode != CompressionMode::kCalr) return primary;
    if (comp.corrective) {
      VarId corr = tape.matmul(tape.matmul(fn, leaf(comp.corrective->a)),
                               leaf(comp.corrective->b));
      return tape.add(primary, corr);
    }
    if (comp.sparse) {
      return tape.add(primary, tape.matmul(fn, leaf(comp.sparse->s)));
    }
    return primary;
  }

 private:
  LossGraph& graph_;
  ParamSet& params_;
  std::unordered_map<const Matrix*, VarId> cache_;
};

}  // namespace detail

/// Record the full forward pass and mean cross-entropy loss on a batch.
/// Weights registered in `params` become tape leaves (trainable ones with
/// gradients); all other weights enter as constants.
inline LossGraph build_lm_graph(const TransformerModel& model, ParamSet& params,
                                const TrainBatch& batch) {
  const ModelConfig& cfg = model.config;
  if (batch.inputs.seq_len > cfg.max_seq_len) {
    throw Error(ErrorCode::kInvalidArgument, "build_lm_graph: batch too long");
  }
  LossGraph graph;
  detail::GraphBuilder builder(graph, params);
  Tape& tape = graph.tape;

  VarId embedding = builder.leaf(model.embedding);
  VarId x = tape.gather_rows(embedding, batch.inputs.ids);
  for (const TransformerBlock& block : model.blocks) {
    VarId xn = tape.rms_norm(x, builder.leaf(block.norm_attn));
    VarId attn = builder.attention(block, xn, batch.inputs.batch,
                                   batch.inputs.seq_len, cfg.n_heads);
    x = tape.add(x, attn);
    VarId fn = tape.rms_norm(x, builder.leaf(block.norm_ffn));
    x = tape.add(x, builder.ffn(block.ffn, fn));
  }
  VarId xf = tape.rms_norm(x, builder.leaf(model.final_norm));
  graph.logits = tape.matmul_nt(xf, embedding);
  graph.loss = tape.cross_entropy_mean(graph.logits, batch.targets);
  return graph;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  int steps = 200;
  int batch_size = 4;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double warmup_frac = 0.05;
  int val_every = 100;
  int val_batches = 25;  // capped validation subset used during training
};

struct TrainMetrics {
  std::vector<double> train_loss;                 // one entry per step
  std::vector<std::pair<int, double>> val_history;  // (step, loss)
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
  int steps_run = 0;
};

/// Mean LM loss over up to `max_batches` validation batches (0 = all).
inline double validation_loss(const TransformerModel& model, const Corpus& corpus,
                              int batch_size, int max_batches = 0) {
  size_t count = corpus.val_batch_count(batch_size);
  if (max_batches > 0) count = std::min(count, static_cast<size_t>(max_batches));
  if (count == 0) {
    throw Error(ErrorCode::kInvalidArgument, "validation_loss: no batches");
  }
  double total = 0.0;
  for (size_t i = 0; i < count; ++i) {
    TrainBatch batch = corpus.val_batch(i, batch_size);
    total += lm_loss(forward(model, batch.inputs).logits, batch.targets);
  }
  return total / static_cast<double>(count);
}

inline TrainMetrics train_loop(TransformerModel& model, const Corpus& corpus,
                               ParamSet& params, const TrainConfig& cfg) {
  if (params.trainable_count() == 0) {
    throw Error(ErrorCode::kInvalidArgument, "train_loop: no trainable parameters");
  }
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  opt_cfg.warmup_steps = static_cast<int>(std::lround(cfg.warmup_frac * cfg.steps));
  opt_cfg.total_steps = cfg.steps;
  AdamW optimizer(params, opt_cfg);

  TrainMetrics metrics;
  metrics.initial_val_loss =
      validation_loss(model, corpus, cfg.batch_size, cfg.val_batches);
  metrics.val_history.emplace_back(0, metrics.initial_val_loss);

  for (int step = 0; step < cfg.steps; ++step) {
    TrainBatch batch = corpus.train_batch(static_cast<size_t>(step), cfg.batch_size);
    LossGraph graph = build_lm_graph(model, params, batch);
    double loss = graph.tape.value(graph.loss)(0, 0);
    if (!std::isfinite(loss)) {
      throw Error(ErrorCode::kNanLoss,
                  "train_loop: non-finite loss at step " + std::to_string(step));
    }
    metrics.train_loss.push_back(loss);
    graph.tape.backward(graph.loss);

    params.clear_grads();
    for (auto& [param, leaf] : graph.leaves) {
      if (!param->trainable) continue;
      params.set_grad(*param, graph.tape.grad(leaf));
    }
    optimizer.step(params);

    if (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0 && step + 1 < cfg.steps) {
      metrics.val_history.emplace_back(
          step + 1, validation_loss(model, corpus, cfg.batch_size, cfg.val_batches));
    }
  }
  metrics.final_val_loss =
      validation_loss(model, corpus, cfg.batch_size, cfg.val_batches);
  metrics.val_history.emplace_back(cfg.steps, metrics.final_val_loss);
  metrics.steps_run = cfg.steps;
  return metrics;
}

}  // namespace calr
