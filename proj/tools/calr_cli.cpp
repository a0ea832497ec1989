// Batch front end for the compression pipeline. Every command reads one JSON
// config (plus flag overrides), writes its artifacts into the output
// directory, and prints a human-readable table to stdout. Exit codes:
// 0 success, 1 runtime failure, 2 usage/config error.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "calr/analysis.hpp"
#include "calr/calr.hpp"
#include "calr/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace calr;

namespace {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  std::string corpus_path;
  TrainConfig train;
  int train_seq_len = 64;
  CompressOptions calr_options;
  uint64_t seed = 1;
  std::string out_dir = "out";
  std::vector<uint64_t> ablate_seeds{1, 2, 3};
  int ablate_steps = 0;  // 0 -> train.steps
  std::vector<int> rank_sweep{2, 4, 8, 16};
  json echo;  // the parsed config, replayed into artifacts
};

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (j.contains(key)) return j.at(key).get<T>();
  return fallback;
}

RunConfig parse_run_config(const fs::path& path) {
  json j = read_json(path);
  RunConfig cfg;
  cfg.echo = j;

  if (j.contains("model")) {
    const json& m = j["model"];
    cfg.model.d_model = get_or(m, "d_model", cfg.model.d_model);
    cfg.model.n_layers = get_or(m, "n_layers", cfg.model.n_layers);
    cfg.model.n_heads = get_or(m, "n_heads", cfg.model.n_heads);
    cfg.model.d_ff = get_or(m, "d_ff", cfg.model.d_ff);
    cfg.model.vocab_size = get_or(m, "vocab_size", cfg.model.vocab_size);
    cfg.model.max_seq_len = get_or(m, "max_seq_len", cfg.model.max_seq_len);
  }
  if (!j.contains("corpus")) {
    throw Error(ErrorCode::kBadConfig, "config: missing \"corpus\" path");
  }
  cfg.corpus_path = j.at("corpus").get<std::string>();

  if (j.contains("train")) {
    const json& t = j["train"];
    cfg.train.steps = get_or(t, "steps", cfg.train.steps);
    cfg.train.batch_size = get_or(t, "batch_size", cfg.train.batch_size);
    cfg.train_seq_len = get_or(t, "seq_len", cfg.train_seq_len);
    cfg.train.lr = get_or(t, "lr", cfg.train.lr);
    cfg.train.weight_decay = get_or(t, "weight_decay", cfg.train.weight_decay);
    cfg.train.warmup_frac = get_or(t, "warmup_frac", cfg.train.warmup_frac);
    cfg.train.val_every = get_or(t, "val_every", cfg.train.val_every);
    cfg.train.val_batches = get_or(t, "val_batches", cfg.train.val_batches);
  }
  if (j.contains("calr")) {
    const json& c = j["calr"];
    cfg.calr_options.n_target = get_or(c, "n_target", cfg.calr_options.n_target);
    cfg.calr_options.r = get_or(c, "r", cfg.calr_options.r);
    cfg.calr_options.r_c = get_or(c, "r_c", cfg.calr_options.r_c);
    cfg.calr_options.strategy = selection_strategy_from_string(
        get_or<std::string>(c, "strategy", "lowest"));
    cfg.calr_options.mode =
        compression_mode_from_string(get_or<std::string>(c, "mode", "calr"));
    cfg.calr_options.corrective_kind = corrective_kind_from_string(
        get_or<std::string>(c, "corrective_kind", "dense"));
    cfg.calr_options.include_qkv = get_or(c, "include_qkv", false);
    cfg.calr_options.n_samples = get_or(c, "n_samples", 100);
    cfg.calr_options.calib_batch_size =
        get_or(c, "calib_batch_size", cfg.train.batch_size);
  }
  if (j.contains("ablate")) {
    const json& a = j["ablate"];
    cfg.ablate_seeds = get_or(a, "seeds", cfg.ablate_seeds);
    cfg.ablate_steps = get_or(a, "steps", 0);
    cfg.rank_sweep = get_or(a, "rank_sweep", cfg.rank_sweep);
  }
  cfg.seed = get_or<uint64_t>(j, "seed", 1);
  cfg.out_dir = get_or<std::string>(j, "out_dir", "out");
  cfg.model.seed = cfg.seed;
  cfg.calr_options.seed = cfg.seed;
  cfg.model.validate();
  return cfg;
}

void apply_seed(RunConfig& cfg, uint64_t seed) {
  cfg.seed = seed;
  cfg.model.seed = seed;
  cfg.calr_options.seed = seed;
  cfg.echo["seed"] = seed;
}

Corpus load_run_corpus(const RunConfig& cfg) {
  return load_corpus(cfg.corpus_path, cfg.train_seq_len, cfg.seed);
}

json artifact_header(const RunConfig& cfg) {
  return json{{"seed", cfg.seed}, {"run_config", cfg.echo}};
}

fs::path prepare_out_dir(const RunConfig& cfg) {
  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_train_base(RunConfig& cfg) {
  Corpus corpus = load_run_corpus(cfg);
  TransformerModel model = init_model(cfg.model);
  ParamSet params = collect_all_params(model);
  std::printf("training base model: %d steps, batch %d x %d\n", cfg.train.steps,
              cfg.train.batch_size, cfg.train_seq_len);
  TrainMetrics metrics = train_loop(model, corpus, params, cfg.train);

  fs::path dir = prepare_out_dir(cfg);
  save_model(model, dir / "base_model.calr");
  json log = artifact_header(cfg);
  log["metrics"] = to_json(metrics);
  log["params"] = to_json(count_params(model));
  emit_json(log, dir / "train_log.json");

  std::printf("%8s %12s\n", "step", "val_loss");
  for (auto& [step, loss] : metrics.val_history) {
    std::printf("%8d %12.4f\n", step, loss);
  }
  std::printf("saved %s\n", (dir / "base_model.calr").c_str());
  return 0;
}

int cmd_profile(RunConfig& cfg, const std::string& model_path, int n_samples) {
  Corpus corpus = load_run_corpus(cfg);
  TransformerModel model = load_model(model_path);
  if (n_samples > 0) cfg.calr_options.n_samples = n_samples;
  std::vector<CalibrationBatch> batches = make_calibration_batches(
      corpus, cfg.calr_options.n_samples, cfg.calr_options.calib_batch_size);
  TransformationProfile profile = profile_transformation(model, batches);

  fs::path dir = prepare_out_dir(cfg);
  json out = artifact_header(cfg);
  out["model_file"] = model_path;
  out["profile"] = to_json(profile);
  emit_json(out, dir / "profile.json");

  std::printf("%6s %14s %14s\n", "layer", "block_score", "ffn_score");
  for (size_t l = 0; l < profile.ffn_scores.size(); ++l) {
    std::printf("%6zu %14.6f %14.6f\n", l, profile.block_scores[l],
                profile.ffn_scores[l]);
  }
  std::printf("samples: %d, skipped positions: %lld\n", profile.samples_used,
              profile.skipped_positions);
  return 0;
}

int cmd_compress(RunConfig& cfg, const std::string& model_path) {
  Corpus corpus = load_run_corpus(cfg);
  TransformerModel base = load_model(model_path);
  TransformerModel compressed = base;
  ConstructionReport construction =
      build_calr_model(compressed, cfg.calr_options, corpus);

  // Self-check: with the corrective path still at zero, full-model logits
  // must equal the svd_only construction's bit for bit.
  if (cfg.calr_options.mode == CompressionMode::kCalr &&
      cfg.calr_options.n_target > 0) {
    TransformerModel reference = base;
    CompressOptions ref_options = cfg.calr_options;
    ref_options.mode = CompressionMode::kSvdOnly;
    ref_options.corrective_kind = CorrectiveKind::kNone;
    build_calr_model(reference, ref_options, corpus);
    CalibrationBatch check = corpus.train_batch(0, 4).inputs;
    if (!(forward(compressed, check).logits == forward(reference, check).logits)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "compress: zero-init logits mismatch against svd_only build");
    }
  }

  fs::path dir = prepare_out_dir(cfg);
  save_model(compressed, dir / "compressed_model.calr");
  CompressionReport report = make_compression_report(base, compressed, construction);
  json out = artifact_header(cfg);
  out["model_file"] = model_path;
  out["construction"] = to_json(construction);
  out["report"] = to_json(report);
  emit_json(out, dir / "compress_report.json");
  emit_compression_csv(report, dir / "compress_report.csv");

  std::printf("selected layers:");
  for (int l : construction.selected) std::printf(" %d", l);
  std::printf("\nparams: %lld -> %lld (reduction %.2f%%)\n",
              report.total_before, report.total_after, 100.0 * report.reduction);
  std::printf("saved %s\n", (dir / "compressed_model.calr").c_str());
  return 0;
}

int cmd_finetune(RunConfig& cfg, const std::string& model_path, bool all_params) {
  Corpus corpus = load_run_corpus(cfg);
  TransformerModel model = load_model(model_path);
  FinetuneResult result = finetune_calr(model, corpus, cfg.train, all_params);

  fs::path dir = prepare_out_dir(cfg);
  save_model(model, dir / "finetuned_model.calr");
  json out = artifact_header(cfg);
  out["model_file"] = model_path;
  out["trained"] = result.trained;
  out["trainable_params"] = result.trainable_params;
  out["all_params"] = all_params;
  out["metrics"] = to_json(result.metrics);
  out["final_val_perplexity"] = std::exp(result.metrics.final_val_loss);
  emit_json(out, dir / "finetune_metrics.json");

  std::printf("trainable params: %zu%s\n", result.trainable_params,
              result.trained ? "" : " (nothing to train)");
  std::printf("val loss: %.4f -> %.4f\n", result.metrics.initial_val_loss,
              result.metrics.final_val_loss);
  std::printf("saved %s\n", (dir / "finetuned_model.calr").c_str());
  return 0;
}

int cmd_eval(RunConfig& cfg, const std::string& model_path, bool bench,
             int bench_batch, int bench_seq, int bench_warmup, int bench_iters,
             int threads) {
  Corpus corpus = load_run_corpus(cfg);
  TransformerModel model = load_model(model_path);
  double loss = validation_loss(model, corpus, cfg.train.batch_size, 0);
  ParamCountReport params = count_params(model);

  fs::path dir = prepare_out_dir(cfg);
  json out = artifact_header(cfg);
  out["model_file"] = model_path;
  out["val_loss"] = loss;
  out["perplexity"] = std::exp(loss);
  out["total_params"] = params.total_logical;
  emit_json(out, dir / "eval.json");
  std::printf("val loss %.4f, perplexity %.3f, params %lld\n", loss,
              std::exp(loss), params.total_logical);

  if (bench) {
    if (bench_seq == 0) bench_seq = cfg.model.max_seq_len;
    ThroughputResult result = throughput_bench(model, bench_batch, bench_seq,
                                               bench_warmup, bench_iters, threads,
                                               cfg.seed);
    json bench_out = artifact_header(cfg);
    bench_out["model_file"] = model_path;
    bench_out["throughput"] = to_json(result);
    emit_json(bench_out, dir / "bench.json");
    std::printf("throughput: %.1f tok/s, %.4f ms/token (median of %d)\n",
                result.tokens_per_sec, result.ms_per_token, result.iters);
  }
  return 0;
}

int cmd_spectrum(RunConfig& cfg, const std::string& base_path,
                 const std::string& compressed_path, std::vector<int> ranks) {
  Corpus corpus = load_run_corpus(cfg);
  TransformerModel base = load_model(base_path);
  TransformerModel compressed = load_model(compressed_path);
  if (base.config.n_layers != compressed.config.n_layers) {
    throw Error(ErrorCode::kBadConfig, "spectrum: model layer counts differ");
  }
  if (ranks.empty()) ranks = {4, 8, 16};

  // Calibration inputs: post-norm FFN inputs from the base model.
  std::vector<CalibrationBatch> batches = make_calibration_batches(
      corpus, std::min(cfg.calr_options.n_samples, 16),
      cfg.calr_options.calib_batch_size);

  fs::path dir = prepare_out_dir(cfg);
  int emitted = 0;
  for (int layer = 0; layer < base.config.n_layers; ++layer) {
    const CompressedFfn* comp =
        std::get_if<CompressedFfn>(&compressed.blocks[layer].ffn);
    if (comp == nullptr) continue;
    const GatedFfn& orig = std::get<GatedFfn>(base.blocks[layer].ffn);

    Matrix calib;
    for (const CalibrationBatch& batch : batches) {
      ForwardResult result = forward(base, batch, /*want_taps=*/true);
      const Matrix& xn = result.taps[layer].ffn_normed_in;
      if (calib.empty()) {
        calib = xn;
      } else {
        Matrix joined(calib.rows() + xn.rows(), calib.cols());
        paste(joined, calib, 0, 0);
        paste(joined, xn, calib.rows(), 0);
        calib = std::move(joined);
      }
    }
    int r_c = comp->corrective ? comp->corrective->rank : comp->g.rank;
    SpectrumReport report = residual_spectrum(orig, calib, ranks, r_c);

    std::string stem = "spectrum_layer" + std::to_string(layer);
    json out = artifact_header(cfg);
    out["layer"] = layer;
    out["base_file"] = base_path;
    out["compressed_file"] = compressed_path;
    out["spectrum"] = to_json(report);
    emit_json(out, dir / (stem + ".json"));

    std::vector<std::vector<std::string>> rows;
    for (const RankSpectrum& s : report.per_rank) {
      for (size_t i = 0; i < s.values.size(); ++i) {
        rows.push_back({std::to_string(s.r), std::to_string(i),
                        csv_double(s.values[i]),
                        csv_double(s.cumulative_energy[i])});
      }
    }
    emit_csv({"rank", "index", "singular_value", "cumulative_energy"}, rows,
             dir / (stem + ".csv"));
    std::printf("layer %d: top sigma per rank:", layer);
    for (const RankSpectrum& s : report.per_rank) {
      std::printf(" r=%d:%.4g", s.r, s.values.empty() ? 0.0 : s.values[0]);
    }
    std::printf(" (top-%d energy at r=%d: %.3f)\n", r_c, report.ranks.front(),
                report.per_rank.front().top_rc_energy);
    ++emitted;
  }
  if (emitted == 0) {
    throw Error(ErrorCode::kBadConfig, "spectrum: no compressed layers found");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Ablation suites
// ---------------------------------------------------------------------------

struct AblateVariant {
  std::string name;
  CompressOptions options;
};

struct AblateRow {
  std::string variant;
  uint64_t seed = 0;
  double val_loss = 0.0;
  double val_ppl = 0.0;
  long long params_after = 0;
  double reduction = 0.0;
  size_t trainable_params = 0;
};

std::vector<AblateVariant> suite_variants(const std::string& suite,
                                          const RunConfig& cfg) {
  CompressOptions base = cfg.calr_options;
  std::vector<AblateVariant> variants;
  if (suite == "modes") {
    base.corrective_kind = CorrectiveKind::kDense;
    base.mode = CompressionMode::kCalr;
    variants.push_back({"calr", base});
    base.mode = CompressionMode::kSvdOnly;
    base.corrective_kind = CorrectiveKind::kNone;
    variants.push_back({"svd_only", base});
    base.mode = CompressionMode::kSvdFixed;
    variants.push_back({"svd_fixed", base});
  } else if (suite == "ranks") {
    base.mode = CompressionMode::kCalr;
    base.corrective_kind = CorrectiveKind::kDense;
    std::vector<int> sweep = cfg.rank_sweep;
    std::sort(sweep.begin(), sweep.end());
    for (int rc : sweep) {
      base.r_c = rc;
      variants.push_back({"r_c=" + std::to_string(rc), base});
    }
  } else if (suite == "strategy") {
    base.mode = CompressionMode::kCalr;
    base.corrective_kind = CorrectiveKind::kDense;
    base.strategy = SelectionStrategy::kLowest;
    variants.push_back({"lowest", base});
    base.strategy = SelectionStrategy::kHighest;
    variants.push_back({"highest", base});
    base.strategy = SelectionStrategy::kRandom;
    variants.push_back({"random", base});
  } else if (suite == "qkv") {
    base.mode = CompressionMode::kCalr;
    base.corrective_kind = CorrectiveKind::kDense;
    base.include_qkv = false;
    variants.push_back({"ffn_only", base});
    base.include_qkv = true;
    variants.push_back({"ffn_qkv", base});
  } else if (suite == "sparse") {
    base.mode = CompressionMode::kCalr;
    base.corrective_kind = CorrectiveKind::kDense;
    variants.push_back({"dense", base});
    base.corrective_kind = CorrectiveKind::kSparse;
    variants.push_back({"sparse", base});
  } else {
    throw Error(ErrorCode::kBadConfig, "ablate: unknown suite " + suite);
  }
  return variants;
}

int cmd_ablate(RunConfig& cfg, const std::string& model_path,
               const std::string& suite) {
  std::vector<AblateVariant> variants = suite_variants(suite, cfg);
  TransformerModel base = load_model(model_path);
  TrainConfig train_cfg = cfg.train;
  if (cfg.ablate_steps > 0) train_cfg.steps = cfg.ablate_steps;

  std::vector<AblateRow> rows;
  for (const AblateVariant& variant : variants) {
    for (uint64_t seed : cfg.ablate_seeds) {
      Corpus corpus = load_corpus(cfg.corpus_path, cfg.train_seq_len, seed);
      TransformerModel model = base;
      CompressOptions options = variant.options;
      options.seed = seed;
      ConstructionReport construction = build_calr_model(model, options, corpus);
      FinetuneResult result = finetune_calr(model, corpus, train_cfg);

      AblateRow row;
      row.variant = variant.name;
      row.seed = seed;
      row.val_loss = validation_loss(model, corpus, train_cfg.batch_size, 0);
      row.val_ppl = std::exp(row.val_loss);
      row.params_after = construction.total_params_after;
      row.reduction = construction.reduction;
      row.trainable_params = result.trainable_params;
      rows.push_back(row);
      std::printf("%-10s seed=%llu val_loss=%.4f ppl=%.2f params=%lld\n",
                  row.variant.c_str(), static_cast<unsigned long long>(seed),
                  row.val_loss, row.val_ppl, row.params_after);
    }
  }

  fs::path dir = prepare_out_dir(cfg);
  json out = artifact_header(cfg);
  out["suite"] = suite;
  out["model_file"] = model_path;
  out["steps"] = train_cfg.steps;
  json table = json::array();
  for (const AblateRow& row : rows) {
    table.push_back({{"variant", row.variant},
                     {"seed", row.seed},
                     {"val_loss", row.val_loss},
                     {"val_ppl", row.val_ppl},
                     {"params_after", row.params_after},
                     {"reduction", row.reduction},
                     {"trainable_params", row.trainable_params}});
  }
  out["rows"] = table;
  json means = json::object();
  for (const AblateVariant& variant : variants) {
    double total = 0.0;
    int n = 0;
    for (const AblateRow& row : rows) {
      if (row.variant == variant.name) {
        total += row.val_loss;
        ++n;
      }
    }
    means[variant.name] = total / std::max(1, n);
  }
  out["mean_val_loss"] = means;
  emit_json(out, dir / ("ablate_" + suite + ".json"));

  std::vector<std::vector<std::string>> csv_rows;
  for (const AblateRow& row : rows) {
    csv_rows.push_back({suite, row.variant, std::to_string(row.seed),
                        csv_double(row.val_loss), csv_double(row.val_ppl),
                        std::to_string(row.params_after),
                        csv_double(100.0 * row.reduction)});
  }
  emit_csv({"suite", "variant", "seed", "val_loss", "val_ppl", "params_after",
            "reduction_pct"},
           csv_rows, dir / ("ablate_" + suite + ".csv"));
  std::printf("wrote %s\n", (dir / ("ablate_" + suite + ".json")).c_str());
  return 0;
}

int classify_error(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kNanLoss:
    case ErrorCode::kSvdNonConvergence:
    case ErrorCode::kMissingGradient:
    case ErrorCode::kTapeConsumed:
      return 1;
    default:
      return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SVD compression of gated FFN layers with a trainable low-rank "
               "corrective path, on a self-trained byte-level transformer"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir_override;
  uint64_t seed_override = 0;
  bool seed_set = false;
  int threads = 1;
  app.add_option("--config", config_path, "run configuration JSON")->required();
  app.add_option("--seed", seed_override, "override the config seed")
      ->each([&seed_set](const std::string&) { seed_set = true; });
  app.add_option("--threads", threads, "matmul thread count");
  app.add_option("--out-dir", out_dir_override, "override the output directory");

  auto* train_base = app.add_subcommand("train-base", "train the base model");

  std::string model_path;
  int n_samples = 0;
  auto* profile = app.add_subcommand("profile", "per-layer transformation scores");
  profile->add_option("--model", model_path, "model file")->required();
  profile->add_option("--n-samples", n_samples, "calibration sample count");

  auto* compress = app.add_subcommand("compress", "factor the selected FFNs");
  compress->add_option("--model", model_path, "base model file")->required();

  bool all_params = false;
  auto* finetune = app.add_subcommand("finetune", "train compressed modules");
  finetune->add_option("--model", model_path, "compressed model file")->required();
  finetune->add_flag("--all-params", all_params,
                     "fine-tune every weight, not only the low-rank factors");

  bool bench = false;
  int bench_batch = 4, bench_seq = 0, bench_warmup = 3, bench_iters = 20;
  auto* eval = app.add_subcommand("eval", "perplexity (and optional throughput)");
  eval->add_option("--model", model_path, "model file")->required();
  eval->add_flag("--bench", bench, "also run the throughput micro-benchmark");
  eval->add_option("--bench-batch", bench_batch, "benchmark batch size");
  eval->add_option("--bench-seq", bench_seq, "benchmark sequence length");
  eval->add_option("--bench-warmup", bench_warmup, "warmup iterations");
  eval->add_option("--bench-iters", bench_iters, "timed iterations");

  std::string base_path, compressed_path;
  std::vector<int> ranks;
  auto* spectrum = app.add_subcommand("spectrum", "residual singular spectra");
  spectrum->add_option("--base", base_path, "uncompressed model file")->required();
  spectrum->add_option("--compressed", compressed_path, "compressed model file")
      ->required();
  spectrum->add_option("--ranks", ranks, "primary ranks to sweep");

  std::string suite;
  auto* ablate = app.add_subcommand("ablate", "matched-budget comparison suites");
  ablate->add_option("--model", model_path, "trained base model file")->required();
  ablate->add_option("--suite", suite, "modes|ranks|strategy|qkv|sparse")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    set_num_threads(threads);
    RunConfig cfg = parse_run_config(config_path);
    if (seed_set) apply_seed(cfg, seed_override);
    if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;

    if (train_base->parsed()) return cmd_train_base(cfg);
    if (profile->parsed()) return cmd_profile(cfg, model_path, n_samples);
    if (compress->parsed()) return cmd_compress(cfg, model_path);
    if (finetune->parsed()) return cmd_finetune(cfg, model_path, all_params);
    if (eval->parsed())
      return cmd_eval(cfg, model_path, bench, bench_batch, bench_seq,
                      bench_warmup, bench_iters, threads);
    if (spectrum->parsed())
      return cmd_spectrum(cfg, base_path, compressed_path, ranks);
    if (ablate->parsed()) return cmd_ablate(cfg, model_path, suite);
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return classify_error(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
