#pragma once

// The compression pipeline: transformation profiling, target selection,
// SVD factorization of FFN (and optionally attention) projections, the
// additive corrective path, functional-residual objectives, and the
// fine-tuning phase that trains the new low-rank parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calr/corpus.hpp"
#include "calr/error.hpp"
#include "calr/ffn.hpp"
#include "calr/matrix.hpp"
#include "calr/model.hpp"
#include "calr/rng.hpp"
#include "calr/svd.hpp"
#include "calr/train.hpp"

namespace calr {

// ---------------------------------------------------------------------------
// Transformation profiling
// ---------------------------------------------------------------------------

/// Mean cosine distance between input and output activations, per block and
/// per FFN sub-block, averaged over token rows. Zero-norm rows are skipped
/// and counted.
struct TransformationProfile {
  std::vector<double> block_scores;
  std::vector<double> ffn_scores;
  int samples_used = 0;
  long long positions_used = 0;
  long long skipped_positions = 0;
};

namespace detail {

struct ScoreAccumulator {
  double sum = 0.0;
  long long count = 0;
  long long skipped = 0;

  void accumulate(const Matrix& in, const Matrix& out) {
    for (int i = 0; i < in.rows(); ++i) {
      auto a = in.row_span(i);
      auto b = out.row_span(i);
      if (norm2(a) == 0.0 || norm2(b) == 0.0) {
        ++skipped;
        continue;
      }
      sum += cosine_distance(a, b);
      ++count;
    }
  }

  double mean() const { return count == 0 ? 0.0 : sum / count; }
};

}  // namespace detail

inline TransformationProfile profile_transformation(
    const TransformerModel& model, std::span<const CalibrationBatch> batches) {
  if (batches.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "profile_transformation: no batches");
  }
  const int n_layers = model.config.n_layers;
  std::vector<detail::ScoreAccumulator> block_acc(n_layers), ffn_acc(n_layers);
  int samples = 0;
  for (const CalibrationBatch& batch : batches) {
    ForwardResult result = forward(model, batch, /*want_taps=*/true);
    for (int l = 0; l < n_layers; ++l) {
      const BlockTaps& taps = result.taps[l];
      block_acc[l].accumulate(taps.block_in, taps.block_out);
      ffn_acc[l].accumulate(taps.ffn_in, taps.ffn_out);
    }
    samples += batch.batch;
  }
  TransformationProfile profile;
  profile.samples_used = samples;
  for (int l = 0; l < n_layers; ++l) {
    profile.block_scores.push_back(block_acc[l].mean());
    profile.ffn_scores.push_back(ffn_acc[l].mean());
    profile.positions_used += ffn_acc[l].count;
    profile.skipped_positions += block_acc[l].skipped + ffn_acc[l].skipped;
  }
  return profile;
}

/// Calibration batches drawn from the head of the shuffled training stream.
inline std::vector<CalibrationBatch> make_calibration_batches(
    const Corpus& corpus, int n_samples, int batch_size) {
  if (n_samples < 1) {
    throw Error(ErrorCode::kInvalidArgument, "calibration: n_samples must be >= 1");
  }
  std::vector<CalibrationBatch> batches;
  int taken = 0;
  for (size_t step = 0; taken < n_samples; ++step) {
    batches.push_back(corpus.train_batch(step, batch_size).inputs);
    taken += batch_size;
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Target selection
// ---------------------------------------------------------------------------

enum class SelectionStrategy { kLowest, kHighest, kRandom };

inline std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kLowest: return "lowest";
    case SelectionStrategy::kHighest: return "highest";
    case SelectionStrategy::kRandom: return "random";
  }
  return "?";
}

inline SelectionStrategy selection_strategy_from_string(const std::string& s) {
  if (s == "lowest") return SelectionStrategy::kLowest;
  if (s == "highest") return SelectionStrategy::kHighest;
  if (s == "random") return SelectionStrategy::kRandom;
  throw Error(ErrorCode::kBadConfig, "unknown selection strategy: " + s);
}

/// Pick n_target layer indices by FFN sub-block score. Ties break toward the
/// shallower layer; the result is sorted ascending.
inline std::vector<int> select_targets(const TransformationProfile& profile,
                                       int n_target, SelectionStrategy strategy,
                                       uint64_t seed = 0) {
  const int n_layers = static_cast<int>(profile.ffn_scores.size());
  if (n_target < 1 || n_target > n_layers) {
    throw Error(ErrorCode::kInvalidArgument,
                "select_targets: n_target " + std::to_string(n_target) +
                    " outside [1, " + std::to_string(n_layers) + "]");
  }
  std::vector<int> order(n_layers);
  std::iota(order.begin(), order.end(), 0);
  switch (strategy) {
    case SelectionStrategy::kLowest:
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return profile.ffn_scores[a] < profile.ffn_scores[b];
      });
      break;
    case SelectionStrategy::kHighest:
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return profile.ffn_scores[a] > profile.ffn_scores[b];
      });
      break;
    case SelectionStrategy::kRandom: {
      Rng rng(derive_seed(seed, 0x73656c));
      rng.shuffle(order);
      break;
    }
  }
  std::vector<int> picked(order.begin(), order.begin() + n_target);
  std::sort(picked.begin(), picked.end());
  return picked;
}

// ---------------------------------------------------------------------------
// Compression
// ---------------------------------------------------------------------------

namespace detail {

inline CorrectiveModule init_corrective(int d_in, int d_out, int r_c, Rng& rng) {
  CorrectiveModule corr;
  corr.rank = r_c;
  double bound = std::sqrt(6.0 / d_in);
  corr.a = rng.uniform_matrix(d_in, r_c, -bound, bound);
  corr.b = Matrix(r_c, d_out);  // exactly zero: the path starts inert
  return corr;
}

/// Ridge-regularized least-squares fit M minimizing ||X M - R||_F, solved
/// through the SVD of the Gram matrix.
inline Matrix least_squares_fit(const Matrix& x, const Matrix& r) {
  Matrix gram = matmul_tn(x, x);
  double trace = 0.0;
  for (int i = 0; i < gram.rows(); ++i) trace += gram(i, i);
  double ridge = 1e-8 * std::max(trace / gram.rows(), 1e-30);
  for (int i = 0; i < gram.rows(); ++i) gram(i, i) += ridge;
  SvdResult g = svd(gram);
  Matrix rhs = matmul_tn(x, r);  // d x d_out
  // M = V diag(1/s) U^T rhs
  Matrix ut_rhs = matmul_tn(g.u, rhs);
  for (int i = 0; i < ut_rhs.rows(); ++i) {
    double inv = g.s[i] > 1e-12 * g.s[0] ? 1.0 / g.s[i] : 0.0;
    for (int j = 0; j < ut_rhs.cols(); ++j) ut_rhs(i, j) *= inv;
  }
  return matmul_tn(g.vt, ut_rhs);
}

/// Sparse corrective: mask holds the largest-magnitude entries of the
/// least-squares residual fit, sized to match the dense corrective's
/// parameter budget (2 * d * r_c nonzeros). S itself starts at zero.
inline SparseCorrective init_sparse_corrective(const Matrix& calib_x,
                                               const Matrix& residual, int r_c) {
  const int d_in = calib_x.cols();
  const int d_out = residual.cols();
  Matrix fit = least_squares_fit(calib_x, residual);
  int budget = std::min<int>(2 * d_in * r_c, d_in * d_out);

  std::vector<int> order(static_cast<size_t>(d_in) * d_out);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return std::abs(fit.data()[a]) > std::abs(fit.data()[b]);
  });

  SparseCorrective sp;
  sp.s = Matrix(d_in, d_out);
  sp.mask = Matrix(d_in, d_out);
  for (int k = 0; k < budget; ++k) sp.mask.data()[order[k]] = 1.0;
  sp.density = static_cast<double>(budget) / (static_cast<double>(d_in) * d_out);
  return sp;
}

}  // namespace detail

/// Replace each FFN projection with its rank-r truncated-SVD pair and attach
/// the corrective path. For the sparse corrective the calibration input
/// (rows of post-norm FFN inputs) is required to pick the mask.
inline CompressedFfn compress_ffn(const GatedFfn& ffn, int r, int r_c,
                                  CompressionMode mode, CorrectiveKind kind,
                                  Rng& rng, const Matrix* calib_x = nullptr) {
  const int d_model = ffn.d_model();
  const int d_ff = ffn.d_ff();
  if (r < 1 || r > std::min(d_model, d_ff)) {
    throw Error(ErrorCode::kRankOutOfRange,
                "compress_ffn: rank " + std::to_string(r) + " outside [1, " +
                    std::to_string(std::min(d_model, d_ff)) + "]");
  }
  if (r_c < 1 || r_c > d_model) {
    throw Error(ErrorCode::kRankOutOfRange,
                "compress_ffn: corrective rank " + std::to_string(r_c) +
                    " outside [1, " + std::to_string(d_model) + "]");
  }
  CompressedFfn comp;
  comp.mode = mode;
  comp.g = truncate(svd(ffn.w_g), r);
  comp.u = truncate(svd(ffn.w_u), r);
  comp.d = truncate(svd(ffn.w_d), r);
  comp.corrective_kind = mode == CompressionMode::kCalr ? kind : CorrectiveKind::kNone;
  if (comp.corrective_kind == CorrectiveKind::kDense) {
    comp.corrective = detail::init_corrective(d_model, d_model, r_c, rng);
  } else if (comp.corrective_kind == CorrectiveKind::kSparse) {
    if (calib_x == nullptr) {
      throw Error(ErrorCode::kInvalidArgument,
                  "compress_ffn: sparse corrective needs calibration input");
    }
    Matrix residual = sub(ffn_forward(ffn, *calib_x), svd_ffn_forward(comp, *calib_x));
    comp.sparse = detail::init_sparse_corrective(*calib_x, residual, r_c);
  }
  return comp;
}

/// Factor one attention projection, with its own dense corrective pair in
/// calr mode.
inline CompressedLinear compress_linear(const Matrix& w, int r, int r_c,
                                        CompressionMode mode, Rng& rng) {
  if (r < 1 || r > std::min(w.rows(), w.cols())) {
    throw Error(ErrorCode::kRankOutOfRange,
                "compress_linear: rank " + std::to_string(r) + " outside [1, " +
                    std::to_string(std::min(w.rows(), w.cols())) + "]");
  }
  CompressedLinear lin;
  lin.mode = mode;
  lin.w = truncate(svd(w), r);
  if (mode == CompressionMode::kCalr) {
    lin.corrective = detail::init_corrective(w.rows(), w.cols(), r_c, rng);
  }
  return lin;
}

// ---------------------------------------------------------------------------
// Functional residual and objective
// ---------------------------------------------------------------------------

/// R_F(x) = F_orig(x) - F_SVD(x); the corrective path is excluded by
/// definition.
inline Matrix functional_residual(const GatedFfn& orig, const CompressedFfn& comp,
                                  const Matrix& x) {
  return sub(ffn_forward(orig, x), svd_ffn_forward(comp, x));
}

/// Mean squared output error of the corrected compressed path against the
/// original, averaged over the batch.
inline double functional_objective(const GatedFfn& orig, const CompressedFfn& comp,
                                   std::span<const Matrix> batch) {
  if (!comp.corrective && !comp.sparse) {
    throw Error(ErrorCode::kInvalidArgument,
                "functional_objective: compressed FFN has no corrective module");
  }
  if (batch.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "functional_objective: empty batch");
  }
  double total = 0.0;
  for (const Matrix& x : batch) {
    Matrix diff = sub(ffn_forward(orig, x), calr_forward(comp, x));
    double acc = 0.0;
    for (size_t i = 0; i < diff.size(); ++i) acc += diff.data()[i] * diff.data()[i];
    total += acc / static_cast<double>(diff.size());
  }
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Whole-model construction
// ---------------------------------------------------------------------------

struct CompressOptions {
  int n_target = 0;
  int r = 8;
  int r_c = 0;  // 0 -> defaults to r
  SelectionStrategy strategy = SelectionStrategy::kLowest;
  CompressionMode mode = CompressionMode::kCalr;
  CorrectiveKind corrective_kind = CorrectiveKind::kDense;
  bool include_qkv = false;
  int n_samples = 100;
  int calib_batch_size = 4;
  uint64_t seed = 1;

  int effective_r_c() const { return r_c > 0 ? r_c : r; }
};

struct LayerConstruction {
  int layer = 0;
  double ffn_score = 0.0;
  long long ffn_params_before = 0;
  long long ffn_params_after = 0;
  long long qkv_params_before = 0;  // zero unless the projections were factored
  long long qkv_params_after = 0;
  int r = 0;
  int r_c = 0;
  bool qkv = false;
};

struct ConstructionReport {
  TransformationProfile profile;
  std::vector<int> selected;
  long long total_params_before = 0;
  long long total_params_after = 0;
  double reduction = 0.0;  // fraction of total params removed
  std::vector<LayerConstruction> layers;
  CompressOptions options;
};

/// Count of stored weight scalars, excluding structural masks; sparse
/// corrective matrices count only their masked-in entries.
inline long long model_param_count(const TransformerModel& model) {
  long long total = 0;
  visit_tensors(model, [&total](const std::string& name, const Matrix& t) {
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".mask") == 0) return;
    total += static_cast<long long>(t.size());
  });
  for (const TransformerBlock& block : model.blocks) {
    if (const CompressedFfn* comp = std::get_if<CompressedFfn>(&block.ffn)) {
      if (comp->sparse) {
        // Replace the dense count of S with its nonzero count.
        total -= static_cast<long long>(comp->sparse->s.size());
        total += comp->sparse->nonzero_count();
      }
    }
  }
  return total;
}

inline long long block_param_count(const TransformerBlock& block) {
  long long total = 0;
  auto proj_count = [](const ProjSlot& slot) -> long long {
    if (const Matrix* w = std::get_if<Matrix>(&slot)) return w->size();
    return std::get<CompressedLinear>(slot).param_count();
  };
  total += proj_count(block.wq) + proj_count(block.wk) + proj_count(block.wv);
  total += static_cast<long long>(block.wo.size());
  total += static_cast<long long>(block.norm_attn.size() + block.norm_ffn.size());
  if (const GatedFfn* dense = std::get_if<GatedFfn>(&block.ffn)) {
    total += static_cast<long long>(dense->w_g.size() + dense->w_u.size() +
                                    dense->w_d.size());
  } else {
    total += std::get<CompressedFfn>(block.ffn).param_count();
  }
  return total;
}

/// Phase 1: profile, select the target FFNs, and swap in the factored
/// replacements (optionally including that block's q/k/v projections).
inline ConstructionReport build_calr_model(TransformerModel& model,
                                           const CompressOptions& options,
                                           const Corpus& corpus) {
  ConstructionReport report;
  report.options = options;
  report.total_params_before = model_param_count(model);

  if (options.n_target == 0) {
    report.total_params_after = report.total_params_before;
    report.reduction = 0.0;
    return report;
  }

  std::vector<CalibrationBatch> batches =
      make_calibration_batches(corpus, options.n_samples, options.calib_batch_size);
  report.profile = profile_transformation(model, batches);
  report.selected = select_targets(report.profile, options.n_target,
                                   options.strategy, options.seed);

  // Post-norm FFN inputs per selected layer, needed for the sparse mask fit.
  std::vector<Matrix> calib_inputs(model.config.n_layers);
  if (options.mode == CompressionMode::kCalr &&
      options.corrective_kind == CorrectiveKind::kSparse) {
    size_t fit_batches = std::min<size_t>(batches.size(), 4);
    for (size_t bi = 0; bi < fit_batches; ++bi) {
      ForwardResult result = forward(model, batches[bi], /*want_taps=*/true);
      for (int layer : report.selected) {
        Matrix& acc = calib_inputs[layer];
        if (acc.empty()) {
          acc = result.taps[layer].ffn_normed_in;
        } else {
          Matrix joined(acc.rows() + result.taps[layer].ffn_normed_in.rows(),
                        acc.cols());
          paste(joined, acc, 0, 0);
          paste(joined, result.taps[layer].ffn_normed_in, acc.rows(), 0);
          acc = std::move(joined);
        }
      }
    }
  }

  const int r_c = options.effective_r_c();
  for (int layer : report.selected) {
    TransformerBlock& block = model.blocks[layer];
    LayerConstruction info;
    info.layer = layer;
    info.ffn_score = report.profile.ffn_scores[layer];
    info.r = options.r;
    info.r_c = r_c;
    info.qkv = options.include_qkv;

    const GatedFfn& dense = std::get<GatedFfn>(block.ffn);
    info.ffn_params_before = static_cast<long long>(dense.w_g.size()) +
                             dense.w_u.size() + dense.w_d.size();
    Rng ffn_rng(derive_seed(options.seed, 0x100 + layer));
    const Matrix* calib_x =
        calib_inputs[layer].empty() ? nullptr : &calib_inputs[layer];
    CompressedFfn comp = compress_ffn(dense, options.r, r_c, options.mode,
                                      options.corrective_kind, ffn_rng, calib_x);
    info.ffn_params_after = comp.param_count();
    block.ffn = std::move(comp);

    if (options.include_qkv) {
      info.qkv_params_before = 3LL * model.config.d_model * model.config.d_model;
      Rng q_rng(derive_seed(options.seed, 0x200 + layer));
      Rng k_rng(derive_seed(options.seed, 0x300 + layer));
      Rng v_rng(derive_seed(options.seed, 0x400 + layer));
      block.wq = compress_linear(std::get<Matrix>(block.wq), options.r, r_c,
                                 options.mode, q_rng);
      block.wk = compress_linear(std::get<Matrix>(block.wk), options.r, r_c,
                                 options.mode, k_rng);
      block.wv = compress_linear(std::get<Matrix>(block.wv), options.r, r_c,
                                 options.mode, v_rng);
      info.qkv_params_after = std::get<CompressedLinear>(block.wq).param_count() +
                              std::get<CompressedLinear>(block.wk).param_count() +
                              std::get<CompressedLinear>(block.wv).param_count();
    }
    report.layers.push_back(info);
  }

  report.total_params_after = model_param_count(model);
  report.reduction =
      static_cast<double>(report.total_params_before - report.total_params_after) /
      static_cast<double>(report.total_params_before);
  return report;
}

// ---------------------------------------------------------------------------
// Phase 2: fine-tuning
// ---------------------------------------------------------------------------

/// Trainable parameters of the compressed modules, per mode: calr trains
/// factors plus corrective, svd_only trains factors, svd_fixed trains
/// nothing. With all_params every model weight trains.
inline ParamSet collect_compressed_params(TransformerModel& model,
                                          bool all_params = false) {
  if (all_params) return collect_all_params(model);
  ParamSet params;
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    TransformerBlock& block = model.blocks[i];
    std::string prefix = "blocks." + std::to_string(i) + ".";
    auto add_linear = [&](const char* name, ProjSlot& slot) {
      CompressedLinear* lin = std::get_if<CompressedLinear>(&slot);
      if (lin == nullptr || lin->mode == CompressionMode::kSvdFixed) return;
      params.add(prefix + "attn." + name + ".a", &lin->w.a);
      params.add(prefix + "attn." + name + ".b", &lin->w.b);
      if (lin->mode == CompressionMode::kCalr && lin->corrective) {
        params.add(prefix + "attn." + name + ".corr.a", &lin->corrective->a);
        params.add(prefix + "attn." + name + ".corr.b", &lin->corrective->b);
      }
    };
    add_linear("wq", block.wq);
    add_linear("wk", block.wk);
    add_linear("wv", block.wv);

    CompressedFfn* comp = std::get_if<CompressedFfn>(&block.ffn);
    if (comp == nullptr || comp->mode == CompressionMode::kSvdFixed) continue;
    params.add(prefix + "ffn.g.a", &comp->g.a);
    params.add(prefix + "ffn.g.b", &comp->g.b);
    params.add(prefix + "ffn.u.a", &comp->u.a);
    params.add(prefix + "ffn.u.b", &comp->u.b);
    params.add(prefix + "ffn.d.a", &comp->d.a);
    params.add(prefix + "ffn.d.b", &comp->d.b);
    if (comp->mode == CompressionMode::kCalr) {
      if (comp->corrective) {
        params.add(prefix + "ffn.corr.a", &comp->corrective->a);
        params.add(prefix + "ffn.corr.b", &comp->corrective->b);
      }
      if (comp->sparse) {
        params.add(prefix + "ffn.sparse.s", &comp->sparse->s, true,
                   &comp->sparse->mask);
      }
    }
  }
  return params;
}

struct FinetuneResult {
  TrainMetrics metrics;
  bool trained = false;
  size_t trainable_params = 0;
};

/// Fine-tune the compressed modules' parameters on the LM loss. In svd_fixed
/// mode nothing trains and the model is returned untouched.
inline FinetuneResult finetune_calr(TransformerModel& model, const Corpus& corpus,
                                    const TrainConfig& cfg, bool all_params = false) {
  bool any_compressed = false;
  for (const TransformerBlock& block : model.blocks) {
    any_compressed = any_compressed || block.ffn_compressed() || block.qkv_compressed();
  }
  if (!any_compressed && !all_params) {
    throw Error(ErrorCode::kInvalidArgument,
                "finetune_calr: model has no compressed modules");
  }
  ParamSet params = collect_compressed_params(model, all_params);
  FinetuneResult result;
  result.trainable_params = params.trainable_scalar_count();
  if (params.trainable_count() == 0) {
    double val = validation_loss(model, corpus, cfg.batch_size, cfg.val_batches);
    result.metrics.initial_val_loss = val;
    result.metrics.final_val_loss = val;
    result.metrics.val_history.emplace_back(0, val);
    result.trained = false;
    return result;
  }
  result.metrics = train_loop(model, corpus, params, cfg);
  result.trained = true;
  return result;
}

}  // namespace calr
