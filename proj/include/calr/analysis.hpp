#pragma once

// Measurement and reporting: parameter accounting, validation perplexity,
// residual singular-value spectra, a CPU throughput micro-benchmark, and
// JSON/CSV emission for all report types.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "calr/calr.hpp"
#include "calr/corpus.hpp"
#include "calr/error.hpp"
#include "calr/model.hpp"
#include "calr/svd.hpp"

namespace calr {

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct TensorCount {
  std::string name;
  int rows = 0;
  int cols = 0;
  long long stored = 0;   // f32 values in the serialized file
  long long logical = 0;  // parameters (masks excluded, sparse S by nonzeros)
};

struct ParamCountReport {
  std::vector<TensorCount> tensors;
  long long total_stored = 0;
  long long total_logical = 0;
};

inline ParamCountReport count_params(const TransformerModel& model) {
  ParamCountReport report;
  visit_tensors(model, [&report](const std::string& name, const Matrix& t) {
    TensorCount c;
    c.name = name;
    c.rows = t.rows();
    c.cols = t.cols();
    c.stored = static_cast<long long>(t.size());
    c.logical = c.stored;
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".mask") == 0) {
      c.logical = 0;
    }
    report.tensors.push_back(std::move(c));
  });
  // Sparse corrective matrices count only masked-in entries.
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    const CompressedFfn* comp = std::get_if<CompressedFfn>(&model.blocks[i].ffn);
    if (comp == nullptr || !comp->sparse) continue;
    std::string s_name = "blocks." + std::to_string(i) + ".ffn.sparse.s";
    for (TensorCount& c : report.tensors) {
      if (c.name == s_name) c.logical = comp->sparse->nonzero_count();
    }
  }
  for (const TensorCount& c : report.tensors) {
    report.total_stored += c.stored;
    report.total_logical += c.logical;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Compression report
// ---------------------------------------------------------------------------

struct CompressionLayerRow {
  int layer = 0;
  long long params_before = 0;  // whole block
  long long params_after = 0;
  int r = 0;    // zero when the layer was not compressed
  int r_c = 0;
  double transformation_score = 0.0;
};

/// Whole-model accounting: per-layer parameter table plus totals, reduction,
/// and (when filled in) retention of the baseline validation metric.
struct CompressionReport {
  long long total_before = 0;
  long long total_after = 0;
  long long non_block_params = 0;  // embedding and final norm
  double reduction = 0.0;          // fraction removed
  std::vector<CompressionLayerRow> rows;
  bool has_metrics = false;
  std::string metric_name = "validation_perplexity";
  double baseline_metric = 0.0;
  double compressed_metric = 0.0;
  double retention_fraction = 0.0;
};

inline CompressionReport make_compression_report(
    const TransformerModel& before, const TransformerModel& after,
    const ConstructionReport& construction) {
  CompressionReport report;
  report.total_before = model_param_count(before);
  report.total_after = model_param_count(after);
  report.non_block_params = static_cast<long long>(before.embedding.size()) +
                            static_cast<long long>(before.final_norm.size());
  report.reduction =
      static_cast<double>(report.total_before - report.total_after) /
      static_cast<double>(report.total_before);
  for (size_t i = 0; i < before.blocks.size(); ++i) {
    CompressionLayerRow row;
    row.layer = static_cast<int>(i);
    row.params_before = block_param_count(before.blocks[i]);
    row.params_after = block_param_count(after.blocks[i]);
    if (i < construction.profile.ffn_scores.size()) {
      row.transformation_score = construction.profile.ffn_scores[i];
    }
    for (const LayerConstruction& l : construction.layers) {
      if (l.layer == static_cast<int>(i)) {
        row.r = l.r;
        row.r_c = l.r_c;
      }
    }
    report.rows.push_back(row);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

/// exp(mean LM loss) over the full validation stream.
inline double perplexity(const TransformerModel& model, const Corpus& corpus,
                         int batch_size) {
  return std::exp(validation_loss(model, corpus, batch_size, /*max_batches=*/0));
}

/// Post-compression quality as a fraction of the baseline. For loss-like
/// metrics (perplexity, loss) lower is better and retention is
/// baseline/compressed; for accuracy-like metrics it is compressed/baseline.
inline double retention(double baseline, double compressed, bool lower_is_better) {
  if (lower_is_better) return baseline / compressed;
  return compressed / baseline;
}

// ---------------------------------------------------------------------------
// Residual spectrum
// ---------------------------------------------------------------------------

struct RankSpectrum {
  int r = 0;
  std::vector<double> values;             // descending singular values
  std::vector<double> cumulative_energy;  // running fraction of squared mass
  std::vector<double> top16;
  double top_rc_energy = 0.0;  // energy fraction captured by the first r_c values
};

struct SpectrumReport {
  std::vector<int> ranks;
  int r_c = 0;
  std::vector<RankSpectrum> per_rank;
};

/// Spectrum of the stacked functional residual F_orig(X) - F_SVD(X), where X
/// holds calibration token rows, for each primary rank in `ranks`.
inline SpectrumReport residual_spectrum(const GatedFfn& orig, const Matrix& calib_x,
                                        const std::vector<int>& ranks, int r_c) {
  if (calib_x.rows() < 1) {
    throw Error(ErrorCode::kInvalidArgument, "residual_spectrum: empty calibration");
  }
  SpectrumReport report;
  report.ranks = ranks;
  report.r_c = r_c;

  SvdResult g = svd(orig.w_g);
  SvdResult u = svd(orig.w_u);
  SvdResult d = svd(orig.w_d);
  Matrix orig_out = ffn_forward(orig, calib_x);

  for (int r : ranks) {
    CompressedFfn comp;
    comp.mode = CompressionMode::kSvdOnly;
    comp.g = truncate(g, r);
    comp.u = truncate(u, r);
    comp.d = truncate(d, r);
    Matrix residual = sub(orig_out, svd_ffn_forward(comp, calib_x));

    RankSpectrum spectrum;
    spectrum.r = r;
    spectrum.values = svd(residual).s;
    double total = 0.0;
    for (double v : spectrum.values) total += v * v;
    double running = 0.0;
    for (double v : spectrum.values) {
      running += v * v;
      spectrum.cumulative_energy.push_back(total > 0.0 ? running / total : 1.0);
    }
    for (size_t i = 0; i < spectrum.values.size() && i < 16; ++i) {
      spectrum.top16.push_back(spectrum.values[i]);
    }
    if (r_c > 0 && !spectrum.cumulative_energy.empty()) {
      size_t idx = std::min<size_t>(r_c, spectrum.cumulative_energy.size()) - 1;
      spectrum.top_rc_energy = spectrum.cumulative_energy[idx];
    }
    report.per_rank.push_back(std::move(spectrum));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Throughput micro-benchmark
// ---------------------------------------------------------------------------

struct ThroughputResult {
  double tokens_per_sec = 0.0;
  double ms_per_token = 0.0;
  double median_seconds = 0.0;
  int batch = 0;
  int seq_len = 0;
  int warmup = 0;
  int iters = 0;
  int threads = 1;
};

inline ThroughputResult throughput_bench(const TransformerModel& model, int batch,
                                         int seq_len, int warmup, int iters,
                                         int threads = 1, uint64_t seed = 1) {
  if (iters < 1) {
    throw Error(ErrorCode::kInvalidArgument, "throughput_bench: iters must be >= 1");
  }
  CalibrationBatch tokens;
  tokens.batch = batch;
  tokens.seq_len = seq_len;
  Rng rng(derive_seed(seed, 0xb3c4));
  tokens.ids.resize(static_cast<size_t>(batch) * seq_len);
  for (auto& id : tokens.ids)
    id = static_cast<int32_t>(rng.index(model.config.vocab_size));

  int saved_threads = num_threads();
  set_num_threads(threads);
  for (int i = 0; i < warmup; ++i) forward(model, tokens);
  std::vector<double> times(iters);
  for (int i = 0; i < iters; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    forward(model, tokens);
    auto t1 = std::chrono::steady_clock::now();
    times[i] = std::chrono::duration<double>(t1 - t0).count();
  }
  set_num_threads(saved_threads);

  std::sort(times.begin(), times.end());
  double median = iters % 2 == 1 ? times[iters / 2]
                                 : 0.5 * (times[iters / 2 - 1] + times[iters / 2]);
  ThroughputResult result;
  result.median_seconds = median;
  double n_tokens = static_cast<double>(batch) * seq_len;
  result.tokens_per_sec = n_tokens / median;
  result.ms_per_token = 1000.0 * median / n_tokens;
  result.batch = batch;
  result.seq_len = seq_len;
  result.warmup = warmup;
  result.iters = iters;
  result.threads = threads;
  return result;
}

// ---------------------------------------------------------------------------
// JSON conversions
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TransformationProfile& p) {
  return nlohmann::json{{"block_scores", p.block_scores},
                        {"ffn_scores", p.ffn_scores},
                        {"samples_used", p.samples_used},
                        {"positions_used", p.positions_used},
                        {"skipped_positions", p.skipped_positions}};
}

inline nlohmann::json to_json(const CompressOptions& o) {
  return nlohmann::json{{"n_target", o.n_target},
                        {"r", o.r},
                        {"r_c", o.effective_r_c()},
                        {"strategy", to_string(o.strategy)},
                        {"mode", to_string(o.mode)},
                        {"corrective_kind", to_string(o.corrective_kind)},
                        {"include_qkv", o.include_qkv},
                        {"n_samples", o.n_samples},
                        {"calib_batch_size", o.calib_batch_size},
                        {"seed", o.seed}};
}

inline nlohmann::json to_json(const ConstructionReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerConstruction& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"ffn_score", l.ffn_score},
                      {"ffn_params_before", l.ffn_params_before},
                      {"ffn_params_after", l.ffn_params_after},
                      {"qkv_params_before", l.qkv_params_before},
                      {"qkv_params_after", l.qkv_params_after},
                      {"r", l.r},
                      {"r_c", l.r_c},
                      {"qkv", l.qkv}});
  }
  return nlohmann::json{{"profile", to_json(r.profile)},
                        {"selected", r.selected},
                        {"total_params_before", r.total_params_before},
                        {"total_params_after", r.total_params_after},
                        {"reduction", r.reduction},
                        {"reduction_pct", 100.0 * r.reduction},
                        {"layers", layers},
                        {"options", to_json(r.options)}};
}

inline nlohmann::json to_json(const TrainMetrics& m) {
  nlohmann::json val = nlohmann::json::array();
  for (auto& [step, loss] : m.val_history) {
    val.push_back({{"step", step}, {"val_loss", loss}});
  }
  return nlohmann::json{{"train_loss", m.train_loss},
                        {"val_history", val},
                        {"initial_val_loss", m.initial_val_loss},
                        {"final_val_loss", m.final_val_loss},
                        {"steps_run", m.steps_run}};
}

inline nlohmann::json to_json(const SpectrumReport& r) {
  nlohmann::json per_rank = nlohmann::json::array();
  for (const RankSpectrum& s : r.per_rank) {
    per_rank.push_back({{"r", s.r},
                        {"values", s.values},
                        {"cumulative_energy", s.cumulative_energy},
                        {"top16", s.top16},
                        {"top_rc_energy", s.top_rc_energy}});
  }
  return nlohmann::json{{"ranks", r.ranks}, {"r_c", r.r_c}, {"per_rank", per_rank}};
}

inline nlohmann::json to_json(const ThroughputResult& t) {
  return nlohmann::json{{"tokens_per_sec", t.tokens_per_sec},
                        {"ms_per_token", t.ms_per_token},
                        {"median_seconds", t.median_seconds},
                        {"batch", t.batch},
                        {"seq_len", t.seq_len},
                        {"warmup", t.warmup},
                        {"iters", t.iters},
                        {"threads", t.threads}};
}

inline nlohmann::json to_json(const CompressionReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const CompressionLayerRow& row : r.rows) {
    rows.push_back({{"layer", row.layer},
                    {"params_before", row.params_before},
                    {"params_after", row.params_after},
                    {"r", row.r},
                    {"r_c", row.r_c},
                    {"transformation_score", row.transformation_score}});
  }
  nlohmann::json j{{"total_before", r.total_before},
                   {"total_after", r.total_after},
                   {"non_block_params", r.non_block_params},
                   {"reduction", r.reduction},
                   {"reduction_pct", 100.0 * r.reduction},
                   {"layers", rows}};
  if (r.has_metrics) {
    j["metric_name"] = r.metric_name;
    j["baseline_metric"] = r.baseline_metric;
    j["compressed_metric"] = r.compressed_metric;
    j["retention_fraction"] = r.retention_fraction;
  }
  return j;
}

/// Fixed column order: layer,params_before,params_after,rank,corrective_rank,
/// transformation_score.
inline void emit_compression_csv(const CompressionReport& r,
                                 const std::filesystem::path& path);

inline nlohmann::json to_json(const ParamCountReport& r) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const TensorCount& c : r.tensors) {
    tensors.push_back({{"name", c.name},
                       {"rows", c.rows},
                       {"cols", c.cols},
                       {"stored", c.stored},
                       {"logical", c.logical}});
  }
  return nlohmann::json{{"tensors", tensors},
                        {"total_stored", r.total_stored},
                        {"total_logical", r.total_logical}};
}

// ---------------------------------------------------------------------------
// File emission
// ---------------------------------------------------------------------------

inline void emit_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::kIoFailure, "emit_json: cannot open " + path.string());
  }
  out << j.dump(2) << "\n";
  if (!out) {
    throw Error(ErrorCode::kIoFailure, "emit_json: write failed for " + path.string());
  }
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIoFailure, "read_json: cannot open " + path.string());
  }
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadConfig,
                "read_json: " + path.string() + ": " + e.what());
  }
}

/// Rows of preformatted cells; the header defines the fixed column order.
inline void emit_csv(const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::kIoFailure, "emit_csv: cannot open " + path.string());
  }
  for (size_t i = 0; i < header.size(); ++i) {
    out << header[i] << (i + 1 < header.size() ? "," : "");
  }
  out << "\n";
  for (const auto& row : rows) {
    if (row.size() != header.size()) {
      throw Error(ErrorCode::kInvalidArgument, "emit_csv: ragged row");
    }
    for (size_t i = 0; i < row.size(); ++i) {
      out << row[i] << (i + 1 < row.size() ? "," : "");
    }
    out << "\n";
  }
  if (!out) {
    throw Error(ErrorCode::kIoFailure, "emit_csv: write failed for " + path.string());
  }
}

/// Fixed-format double for CSV cells: round-trippable, locale-independent.
inline std::string csv_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void emit_compression_csv(const CompressionReport& r,
                                 const std::filesystem::path& path) {
  std::vector<std::vector<std::string>> rows;
  for (const CompressionLayerRow& row : r.rows) {
    rows.push_back({std::to_string(row.layer), std::to_string(row.params_before),
                    std::to_string(row.params_after), std::to_string(row.r),
                    std::to_string(row.r_c), csv_double(row.transformation_score)});
  }
  emit_csv({"layer", "params_before", "params_after", "rank", "corrective_rank",
            "transformation_score"},
           rows, path);
}

}  // namespace calr
