#include "calr/corpus.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace calr;

namespace {

std::vector<uint8_t> synthetic_bytes(size_t n) {
  std::vector<uint8_t> bytes(n);
  for (size_t i = 0; i < n; ++i) bytes[i] = static_cast<uint8_t>('a' + i % 23);
  return bytes;
}

}  // namespace

TEST(Corpus, ByteTokenizationIsIdentity) {
  auto ids = tokenize_bytes("abc");
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(ids[0], 97);
  EXPECT_EQ(ids[1], 98);
  EXPECT_EQ(ids[2], 99);
}

TEST(Corpus, SameSeedSameBatchSequence) {
  Corpus a(synthetic_bytes(4096), 16, 42);
  Corpus b(synthetic_bytes(4096), 16, 42);
  for (size_t step = 0; step < 20; ++step) {
    TrainBatch ba = a.train_batch(step, 4);
    TrainBatch bb = b.train_batch(step, 4);
    EXPECT_EQ(ba.inputs.ids, bb.inputs.ids);
    EXPECT_EQ(ba.targets, bb.targets);
  }
  Corpus c(synthetic_bytes(4096), 16, 43);
  EXPECT_NE(a.train_batch(0, 4).inputs.ids, c.train_batch(0, 4).inputs.ids);
}

TEST(Corpus, TrainValWindowsDisjointAndExhaustive) {
  const int seq_len = 7;
  const size_t n_bytes = 50 * (seq_len + 1) + 3;  // 50 whole windows + slack
  Corpus corpus(synthetic_bytes(n_bytes), seq_len, 9);
  std::set<size_t> train(corpus.train_windows().begin(), corpus.train_windows().end());
  std::set<size_t> val(corpus.val_windows().begin(), corpus.val_windows().end());
  EXPECT_EQ(train.size(), corpus.train_windows().size());
  EXPECT_EQ(val.size(), corpus.val_windows().size());
  EXPECT_EQ(train.size() + val.size(), 50u);
  for (size_t w : val) EXPECT_EQ(train.count(w), 0u);
  for (size_t w = 0; w < 50; ++w) {
    EXPECT_TRUE(train.count(w) || val.count(w));
  }
  EXPECT_EQ(val.size(), 5u);  // 10% held out
}

TEST(Corpus, TargetsAreInputsShiftedLeft) {
  Corpus corpus(synthetic_bytes(2048), 8, 1);
  TrainBatch batch = corpus.train_batch(0, 2);
  ASSERT_EQ(batch.inputs.ids.size(), 16u);
  ASSERT_EQ(batch.targets.size(), 16u);
  // Within a row, target t equals input t+1.
  for (int b = 0; b < 2; ++b) {
    for (int t = 0; t + 1 < 8; ++t) {
      EXPECT_EQ(batch.targets[b * 8 + t], batch.inputs.ids[b * 8 + t + 1]);
    }
  }
}

TEST(Corpus, SmallFileRejected) {
  namespace fs = std::filesystem;
  fs::path path = fs::temp_directory_path() / "calr_tiny_corpus.txt";
  std::ofstream(path) << std::string(1000, 'x');
  try {
    load_corpus(path, 16, 1);
    FAIL() << "expected corpus-too-small error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCorpusTooSmall);
  }
  fs::remove(path);
}

TEST(Corpus, MissingFileRejected) {
  try {
    load_corpus("/nonexistent/corpus.txt", 16, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIoFailure);
  }
}
