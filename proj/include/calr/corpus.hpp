#pragma once

// Byte-level corpus ingestion. The corpus is cut into non-overlapping
// windows of seq_len+1 bytes (input plus next-byte targets), the window
// order is shuffled once with the given seed, and the last 10% of the
// shuffled order is held out for validation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "calr/error.hpp"
#include "calr/rng.hpp"

namespace calr {

constexpr size_t kMinCorpusBytes = 64 * 1024;

/// Token ids arranged batch x seq_len, row-major.
struct CalibrationBatch {
  int batch = 0;
  int seq_len = 0;
  std::vector<int32_t> ids;

  int32_t at(int b, int t) const { return ids[static_cast<size_t>(b) * seq_len + t]; }
};

/// A calibration batch paired with next-token targets (inputs shifted left).
struct TrainBatch {
  CalibrationBatch inputs;
  std::vector<int32_t> targets;  // batch * seq_len, row-major
};

class Corpus {
 public:
  Corpus(std::vector<uint8_t> bytes, int seq_len, uint64_t seed)
      : bytes_(std::move(bytes)), seq_len_(seq_len), seed_(seed) {
    if (seq_len_ < 1) {
      throw Error(ErrorCode::kInvalidArgument, "corpus: seq_len must be >= 1");
    }
    size_t window_bytes = static_cast<size_t>(seq_len_) + 1;
    size_t count = bytes_.size() / window_bytes;
    if (count < 2) {
      throw Error(ErrorCode::kCorpusTooSmall,
                  "corpus: too few windows (" + std::to_string(count) + ")");
    }
    std::vector<size_t> order(count);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(derive_seed(seed_, 0x636f7270));
    rng.shuffle(order);
    size_t n_val = std::max<size_t>(1, count / 10);
    size_t n_train = count - n_val;
    train_windows_.assign(order.begin(), order.begin() + n_train);
    val_windows_.assign(order.begin() + n_train, order.end());
  }

  int seq_len() const { return seq_len_; }
  size_t train_window_count() const { return train_windows_.size(); }
  size_t val_window_count() const { return val_windows_.size(); }
  const std::vector<size_t>& train_windows() const { return train_windows_; }
  const std::vector<size_t>& val_windows() const { return val_windows_; }

  /// Training batch for a given step index, cycling through the shuffled
  /// train windows. Fully determined by (seed, seq_len, batch_size, step).
  TrainBatch train_batch(size_t step, int batch_size) const {
    std::vector<size_t> windows(batch_size);
    for (int b = 0; b < batch_size; ++b) {
      windows[b] = train_windows_[(step * batch_size + b) % train_windows_.size()];
    }
    return make_batch(windows);
  }

  size_t val_batch_count(int batch_size) const {
    return val_windows_.size() / batch_size;
  }

  TrainBatch val_batch(size_t index, int batch_size) const {
    std::vector<size_t> windows(batch_size);
    for (int b = 0; b < batch_size; ++b) {
      windows[b] = val_windows_[index * batch_size + b];
    }
    return make_batch(windows);
  }

 private:
  TrainBatch make_batch(const std::vector<size_t>& windows) const {
    TrainBatch out;
    out.inputs.batch = static_cast<int>(windows.size());
    out.inputs.seq_len = seq_len_;
    out.inputs.ids.reserve(windows.size() * seq_len_);
    out.targets.reserve(windows.size() * seq_len_);
    size_t window_bytes = static_cast<size_t>(seq_len_) + 1;
    for (size_t w : windows) {
      const uint8_t* p = bytes_.data() + w * window_bytes;
      for (int t = 0; t < seq_len_; ++t) out.inputs.ids.push_back(p[t]);
      for (int t = 0; t < seq_len_; ++t) out.targets.push_back(p[t + 1]);
    }
    return out;
  }

  std::vector<uint8_t> bytes_;
  int seq_len_;
  uint64_t seed_;
  std::vector<size_t> train_windows_;
  std::vector<size_t> val_windows_;
};

inline std::vector<uint8_t> tokenize_bytes(const std::string& text) {
  return {text.begin(), text.end()};
}

inline Corpus load_corpus(const std::filesystem::path& path, int seq_len,
                          uint64_t seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kIoFailure, "corpus: cannot open " + path.string());
  }
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < kMinCorpusBytes) {
    throw Error(ErrorCode::kCorpusTooSmall,
                "corpus: " + path.string() + " has " +
                    std::to_string(bytes.size()) + " bytes, need at least " +
                    std::to_string(kMinCorpusBytes));
  }
  return Corpus(std::move(bytes), seq_len, seed);
}

}  // namespace calr
