#include "calr/serialize.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "calr/rng.hpp"

using namespace calr;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 16;
  cfg.seed = 5;
  return cfg;
}

void round_to_f32(TransformerModel& model) {
  visit_tensors(model, [](const std::string&, Matrix& t) {
    for (size_t i = 0; i < t.size(); ++i)
      t.data()[i] = static_cast<double>(static_cast<float>(t.data()[i]));
  });
}

CalibrationBatch fixed_batch() {
  CalibrationBatch batch;
  batch.batch = 2;
  batch.seq_len = 8;
  Rng rng(71);
  batch.ids.resize(16);
  for (auto& id : batch.ids) id = static_cast<int32_t>(rng.index(256));
  return batch;
}

TransformerModel compressed_fixture() {
  TransformerModel model = init_model(tiny_config());
  TransformerBlock& block = model.blocks[1];
  const GatedFfn& dense = std::get<GatedFfn>(block.ffn);
  CompressedFfn comp;
  comp.mode = CompressionMode::kCalr;
  comp.corrective_kind = CorrectiveKind::kDense;
  comp.g = truncate(svd(dense.w_g), 4);
  comp.u = truncate(svd(dense.w_u), 4);
  comp.d = truncate(svd(dense.w_d), 4);
  Rng rng(73);
  CorrectiveModule corr;
  corr.rank = 4;
  corr.a = rng.uniform_matrix(16, 4, -0.5, 0.5);
  corr.b = Matrix(4, 16);
  comp.corrective = std::move(corr);
  block.ffn = std::move(comp);
  return model;
}

}  // namespace

TEST(Serialize, RoundTripMatches32BitRoundedModel) {
  TransformerModel model = init_model(tiny_config());
  fs::path path = fs::temp_directory_path() / "calr_rt.calr";
  save_model(model, path);
  TransformerModel loaded = load_model(path);

  TransformerModel rounded = model;
  round_to_f32(rounded);

  CalibrationBatch batch = fixed_batch();
  EXPECT_EQ(forward(loaded, batch).logits, forward(rounded, batch).logits);
  fs::remove(path);
}

TEST(Serialize, SaveLoadSaveIsByteStable) {
  TransformerModel model = init_model(tiny_config());
  std::string first = serialize_model(model);
  TransformerModel loaded = deserialize_model(first);
  std::string second = serialize_model(loaded);
  EXPECT_EQ(first, second);
}

TEST(Serialize, CompressedModelRoundTrip) {
  TransformerModel model = compressed_fixture();
  std::string buf = serialize_model(model);
  TransformerModel loaded = deserialize_model(buf);
  ASSERT_TRUE(loaded.blocks[1].ffn_compressed());
  const CompressedFfn& comp = std::get<CompressedFfn>(loaded.blocks[1].ffn);
  EXPECT_EQ(comp.mode, CompressionMode::kCalr);
  EXPECT_EQ(comp.g.rank, 4);
  ASSERT_TRUE(comp.corrective.has_value());
  EXPECT_EQ(comp.corrective->rank, 4);
  EXPECT_EQ(max_abs(comp.corrective->b), 0.0);
  EXPECT_EQ(serialize_model(loaded), buf);

  CalibrationBatch batch = fixed_batch();
  TransformerModel rounded = model;
  round_to_f32(rounded);
  EXPECT_EQ(forward(loaded, batch).logits, forward(rounded, batch).logits);
}

TEST(Serialize, BadMagicRejected) {
  std::string buf = serialize_model(init_model(tiny_config()));
  buf[0] = 'X';
  try {
    deserialize_model(buf);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBadMagic);
  }
}

TEST(Serialize, BadVersionRejected) {
  std::string buf = serialize_model(init_model(tiny_config()));
  buf[4] = 9;
  try {
    deserialize_model(buf);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBadVersion);
  }
}

TEST(Serialize, TruncatedTensorNamed) {
  std::string buf = serialize_model(init_model(tiny_config()));
  buf.resize(buf.size() - 4);  // chop the tail of the last tensor
  try {
    deserialize_model(buf);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTruncatedTensor);
    EXPECT_NE(std::string(e.what()).find("final_norm"), std::string::npos);
  }
}
