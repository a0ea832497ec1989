#include "calr/analysis.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "calr/serialize.hpp"
#include "test_fixtures.hpp"

using namespace calr;
using calr_test::synthetic_corpus;
using calr_test::tiny_config;
namespace fs = std::filesystem;

namespace {

ModelConfig toy_config(uint64_t seed = 17) {
  ModelConfig cfg;
  cfg.d_model = 64;
  cfg.n_layers = 8;
  cfg.n_heads = 4;
  cfg.d_ff = 256;
  cfg.max_seq_len = 128;
  cfg.seed = seed;
  return cfg;
}

// Independent walk over the serialized file: reads only the binary layout,
// summing rows*cols per tensor.
long long tensor_walk_file(const std::string& buf) {
  auto u32_at = [&](size_t pos) {
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    return v;
  };
  size_t pos = 4 + 4;  // magic, version
  uint32_t config_len = u32_at(pos);
  pos += 4 + config_len;
  uint32_t count = u32_at(pos);
  pos += 4;
  long long total = 0;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = u32_at(pos);
    pos += 4 + name_len;
    uint32_t rows = u32_at(pos);
    uint32_t cols = u32_at(pos + 4);
    pos += 8;
    total += static_cast<long long>(rows) * cols;
    pos += static_cast<size_t>(rows) * cols * 4;
  }
  EXPECT_EQ(pos, buf.size());
  return total;
}

}  // namespace

TEST(CountParams, ToyBaseFfnAttributable) {
  TransformerModel model = init_model(toy_config());
  ParamCountReport report = count_params(model);
  long long ffn_total = 0;
  for (const TensorCount& c : report.tensors) {
    if (c.name.find(".ffn.") != std::string::npos) ffn_total += c.logical;
  }
  EXPECT_EQ(ffn_total, 8LL * 3 * 16384);
  EXPECT_EQ(ffn_total, 393216);
  EXPECT_EQ(report.total_logical, model_param_count(model));
  EXPECT_EQ(report.total_stored, report.total_logical);  // dense model
}

TEST(CountParams, CompressedFfnAttributable) {
  TransformerModel model = init_model(toy_config());
  Corpus corpus = synthetic_corpus(32, 17);
  CompressOptions options;
  options.n_target = 4;
  options.r = 8;
  options.r_c = 8;
  options.seed = 17;
  options.n_samples = 8;
  build_calr_model(model, options, corpus);

  ParamCountReport report = count_params(model);
  long long ffn_total = 0;
  for (const TensorCount& c : report.tensors) {
    if (c.name.find(".ffn.") != std::string::npos) ffn_total += c.logical;
  }
  EXPECT_EQ(ffn_total, 4LL * 49152 + 4LL * 8704);
  EXPECT_EQ(ffn_total, 231424);
}

TEST(CountParams, AgreesWithIndependentTensorWalkOfFile) {
  TransformerModel model = init_model(tiny_config());
  std::string buf = serialize_model(model);
  EXPECT_EQ(count_params(model).total_stored, tensor_walk_file(buf));

  // Also after compression (dense corrective keeps stored == logical).
  Corpus corpus = synthetic_corpus(12, 3);
  CompressOptions options;
  options.n_target = 1;
  options.r = 4;
  options.seed = 3;
  options.n_samples = 4;
  build_calr_model(model, options, corpus);
  ParamCountReport report = count_params(model);
  EXPECT_EQ(report.total_stored, tensor_walk_file(serialize_model(model)));
  EXPECT_EQ(report.total_logical, report.total_stored);
}

TEST(CountParams, EmptySelectionKeepsTotals) {
  TransformerModel model = init_model(tiny_config());
  long long before = count_params(model).total_logical;
  Corpus corpus = synthetic_corpus(12, 5);
  CompressOptions options;
  options.n_target = 0;
  build_calr_model(model, options, corpus);
  EXPECT_EQ(count_params(model).total_logical, before);
}

TEST(CompressionReportTest, TotalsReconcileWithLayerSums) {
  TransformerModel base = init_model(tiny_config());
  TransformerModel compressed = base;
  Corpus corpus = synthetic_corpus(12, 7);
  CompressOptions options;
  options.n_target = 1;
  options.r = 4;
  options.seed = 7;
  options.n_samples = 4;
  ConstructionReport construction = build_calr_model(compressed, options, corpus);

  CompressionReport report = make_compression_report(base, compressed, construction);
  long long sum_before = report.non_block_params;
  long long sum_after = report.non_block_params;
  for (const CompressionLayerRow& row : report.rows) {
    sum_before += row.params_before;
    sum_after += row.params_after;
  }
  EXPECT_EQ(sum_before, report.total_before);
  EXPECT_EQ(sum_after, report.total_after);
  double recomputed = static_cast<double>(report.total_before - report.total_after) /
                      report.total_before;
  EXPECT_NEAR(report.reduction, recomputed, 1e-9);
}

TEST(Retention, DirectionPerMetricKind) {
  EXPECT_NEAR(retention(10.0, 20.0, /*lower_is_better=*/true), 0.5, 1e-12);
  EXPECT_NEAR(retention(10.0, 10.0, true), 1.0, 1e-12);
  EXPECT_NEAR(retention(0.8, 0.4, /*lower_is_better=*/false), 0.5, 1e-12);
  EXPECT_NEAR(retention(0.8, 0.8, false), 1.0, 1e-12);
}

TEST(Perplexity, UniformModelIs256) {
  TransformerModel model = init_model(tiny_config());
  model.embedding.fill(0.0);  // zero embedding -> all-zero logits -> uniform
  Corpus corpus = synthetic_corpus(12, 11);
  double ppl = perplexity(model, corpus, 2);
  EXPECT_NEAR(ppl, 256.0, 256.0 * 1e-6);
}

TEST(Perplexity, ExpOfValidationLossIdentity) {
  TransformerModel model = init_model(tiny_config());
  Corpus corpus = synthetic_corpus(12, 13);
  double loss = validation_loss(model, corpus, 2, 0);
  EXPECT_NEAR(perplexity(model, corpus, 2), std::exp(loss), 1e-12);
}

TEST(Perplexity, TrainedModelBeatsUniform) {
  TransformerModel model = init_model(tiny_config(19));
  Corpus corpus = synthetic_corpus(16, 19);
  ParamSet params = collect_all_params(model);
  TrainConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.val_every = 0;
  cfg.val_batches = 4;
  train_loop(model, corpus, params, cfg);
  EXPECT_LT(perplexity(model, corpus, 4), 256.0);
}

namespace {

Matrix decaying_matrix(int rows, int cols, uint64_t seed, double decay) {
  Rng rng(seed);
  SvdResult s = svd(rng.gaussian_matrix(rows, cols, 1.0));
  Matrix scaled_u = s.u;
  for (size_t k = 0; k < s.s.size(); ++k) {
    double target = s.s[0] * std::pow(decay, static_cast<double>(k));
    for (int i = 0; i < scaled_u.rows(); ++i)
      scaled_u(i, static_cast<int>(k)) *= target;
  }
  return matmul(scaled_u, s.vt);
}

GatedFfn spectrum_ffn(uint64_t seed) {
  return GatedFfn{decaying_matrix(32, 64, seed, 0.8),
                  decaying_matrix(32, 64, seed + 1, 0.8),
                  decaying_matrix(64, 32, seed + 2, 0.8)};
}

}  // namespace

TEST(Spectrum, FullRankResidualVanishes) {
  GatedFfn ffn = spectrum_ffn(23);
  Matrix calib = Rng(29).gaussian_matrix(48, 32, 1.0);
  SpectrumReport report = residual_spectrum(ffn, calib, {32}, 4);
  double scale = max_abs(ffn_forward(ffn, calib));
  for (double v : report.per_rank[0].values) {
    EXPECT_LE(v, 1e-6 * std::max(1.0, scale));
  }
}

TEST(Spectrum, InvariantsHold) {
  GatedFfn ffn = spectrum_ffn(31);
  Matrix calib = Rng(37).gaussian_matrix(48, 32, 1.0);
  SpectrumReport report = residual_spectrum(ffn, calib, {4, 8, 16}, 8);
  ASSERT_EQ(report.per_rank.size(), 3u);
  for (const RankSpectrum& s : report.per_rank) {
    for (size_t i = 0; i + 1 < s.values.size(); ++i) {
      EXPECT_GE(s.values[i], s.values[i + 1]);
    }
    for (double v : s.values) EXPECT_GE(v, 0.0);
    for (size_t i = 0; i + 1 < s.cumulative_energy.size(); ++i) {
      EXPECT_LE(s.cumulative_energy[i], s.cumulative_energy[i + 1] + 1e-15);
    }
    EXPECT_NEAR(s.cumulative_energy.back(), 1.0, 1e-9);
    EXPECT_EQ(s.top16.size(), 16u);
    EXPECT_GT(s.top_rc_energy, 0.0);
    EXPECT_LE(s.top_rc_energy, 1.0 + 1e-12);
  }
}

TEST(Spectrum, TopValueShrinksWithRank) {
  GatedFfn ffn = spectrum_ffn(41);
  Matrix calib = Rng(43).gaussian_matrix(48, 32, 1.0);
  SpectrumReport report = residual_spectrum(ffn, calib, {4, 16}, 4);
  EXPECT_GE(report.per_rank[0].values[0], report.per_rank[1].values[0]);
}

TEST(Throughput, ReciprocalIdentity) {
  TransformerModel model = init_model(tiny_config());
  ThroughputResult result = throughput_bench(model, 2, 8, 1, 5);
  EXPECT_NEAR(result.ms_per_token * result.tokens_per_sec, 1000.0, 50.0);
  EXPECT_GT(result.tokens_per_sec, 0.0);
}

TEST(Throughput, ZeroItersRejected) {
  TransformerModel model = init_model(tiny_config());
  try {
    throughput_bench(model, 2, 8, 0, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(Emit, JsonRoundTrip) {
  fs::path path = fs::temp_directory_path() / "calr_report.json";
  nlohmann::json j{{"a", 1}, {"b", {1.5, 2.5}}, {"c", "text"}};
  emit_json(j, path);
  EXPECT_EQ(read_json(path), j);
  fs::remove(path);
}

TEST(Emit, CompressionCsvRowCountAndReconciliation) {
  TransformerModel base = init_model(tiny_config());
  TransformerModel compressed = base;
  Corpus corpus = synthetic_corpus(12, 47);
  CompressOptions options;
  options.n_target = 1;
  options.r = 4;
  options.seed = 47;
  options.n_samples = 4;
  ConstructionReport construction = build_calr_model(compressed, options, corpus);
  CompressionReport report = make_compression_report(base, compressed, construction);

  fs::path path = fs::temp_directory_path() / "calr_report.csv";
  emit_compression_csv(report, path);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 1 + static_cast<int>(report.rows.size()));
  fs::remove(path);
}

TEST(Emit, CsvRejectsRaggedRows) {
  fs::path path = fs::temp_directory_path() / "calr_bad.csv";
  EXPECT_THROW(emit_csv({"a", "b"}, {{"1"}}, path), Error);
  fs::remove(path);
}
