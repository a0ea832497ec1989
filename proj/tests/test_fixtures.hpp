#pragma once

// Shared fixtures: tiny model configs and a deterministic synthetic corpus
// with enough byte-level structure for a toy LM to learn.

#include <string>

#include "calr/corpus.hpp"
#include "calr/model.hpp"
#include "calr/rng.hpp"
#include "calr/serialize.hpp"

namespace calr_test {

inline calr::ModelConfig tiny_config(uint64_t seed = 5) {
  calr::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 16;
  cfg.seed = seed;
  return cfg;
}

inline std::string synthetic_text(uint64_t seed, size_t target_bytes) {
  static const char* words[] = {"the",  "cat",   "sat",   "on",    "a",
                                "mat",  "dog",   "ran",   "fast",  "tree",
                                "bird", "sang",  "songs", "river", "flows"};
  calr::Rng rng(calr::derive_seed(seed, 0x7465787));
  std::string text;
  text.reserve(target_bytes + 64);
  while (text.size() < target_bytes) {
    text += words[rng.index(15)];
    text += (rng.index(12) == 0) ? ". " : " ";
  }
  return text;
}

inline calr::Corpus synthetic_corpus(int seq_len, uint64_t seed,
                                     size_t target_bytes = 96 * 1024) {
  return calr::Corpus(calr::tokenize_bytes(synthetic_text(seed, target_bytes)),
                      seq_len, seed);
}

inline calr::CalibrationBatch random_token_batch(int batch, int seq_len,
                                                 uint64_t seed) {
  calr::CalibrationBatch out;
  out.batch = batch;
  out.seq_len = seq_len;
  calr::Rng rng(seed);
  out.ids.resize(static_cast<size_t>(batch) * seq_len);
  for (auto& id : out.ids) id = static_cast<int32_t>(rng.index(256));
  return out;
}

}  // namespace calr_test
