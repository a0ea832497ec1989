#include "calr/train.hpp"

#include <gtest/gtest.h>

#include "calr/rng.hpp"
#include "gradcheck_util.hpp"

using namespace calr;

namespace {

ModelConfig tiny_config(uint64_t seed = 5) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 16;
  cfg.seed = seed;
  return cfg;
}

// Word-salad text with strong byte statistics; enough for a toy LM to learn.
Corpus synthetic_corpus(int seq_len, uint64_t seed, size_t target_bytes = 96 * 1024) {
  static const char* words[] = {"the",  "cat",   "sat",   "on",    "a",
                                "mat",  "dog",   "ran",   "fast",  "tree",
                                "bird", "sang",  "songs", "river", "flows"};
  Rng rng(derive_seed(seed, 0x7465787));
  std::string text;
  text.reserve(target_bytes + 64);
  while (text.size() < target_bytes) {
    text += words[rng.index(15)];
    text += (rng.index(12) == 0) ? ". " : " ";
  }
  return Corpus(tokenize_bytes(text), seq_len, seed);
}

TrainBatch fixed_batch(const Corpus& corpus) { return corpus.train_batch(0, 2); }

}  // namespace

TEST(Train, TapeForwardMatchesEvalForwardBitExactly) {
  TransformerModel model = init_model(tiny_config());
  Corpus corpus = synthetic_corpus(12, 3);
  TrainBatch batch = fixed_batch(corpus);

  ParamSet params = collect_all_params(model);
  LossGraph graph = build_lm_graph(model, params, batch);
  ForwardResult eval = forward(model, batch.inputs);

  EXPECT_EQ(graph.tape.value(graph.logits), eval.logits);
  EXPECT_EQ(graph.tape.value(graph.loss)(0, 0), lm_loss(eval.logits, batch.targets));
}

TEST(Train, FullModelGradientsMatchFiniteDifferences) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 8;
  cfg.seed = 7;
  TransformerModel model = init_model(cfg);
  // Perturb norms away from 1 so their gradients are generic.
  Rng rng(11);
  for (auto& block : model.blocks) {
    block.norm_attn = rng.uniform_matrix(1, 8, 0.8, 1.2);
    block.norm_ffn = rng.uniform_matrix(1, 8, 0.8, 1.2);
  }
  Corpus corpus = synthetic_corpus(6, 13);
  TrainBatch batch = fixed_batch(corpus);

  ParamSet params = collect_all_params(model);
  LossGraph graph = build_lm_graph(model, params, batch);
  graph.tape.backward(graph.loss);

  calr_test::GradCompare cmp;
  for (auto& [param, leaf] : graph.leaves) {
    Matrix numeric = calr_test::fd_gradient(*param->value, [&]() {
      return lm_loss(forward(model, batch.inputs).logits, batch.targets);
    });
    // Floor at 1e-6: entries below that are dominated by fd roundoff at
    // this loss scale.
    cmp.accumulate(graph.tape.grad(leaf), numeric, 1e-3, 1e-6);
  }
  EXPECT_TRUE(cmp.all_match()) << "failed " << cmp.failed << "/" << cmp.checked
                               << " max rel err " << cmp.max_rel_err;
}

TEST(Train, ZeroLearningRateLeavesWeightsBitIdentical) {
  TransformerModel model = init_model(tiny_config());
  std::string before = [&] {
    std::vector<std::pair<std::string, Matrix>> tensors;
    visit_tensors(model, [&](const std::string& n, const Matrix& t) {
      tensors.emplace_back(n, t);
    });
    std::string repr;
    for (auto& [n, t] : tensors) {
      repr += n;
      repr.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
    }
    return repr;
  }();

  Corpus corpus = synthetic_corpus(12, 17);
  ParamSet params = collect_all_params(model);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 2;
  cfg.lr = 0.0;
  cfg.weight_decay = 0.0;
  cfg.val_every = 0;
  cfg.val_batches = 2;
  train_loop(model, corpus, params, cfg);

  std::string after = [&] {
    std::vector<std::pair<std::string, Matrix>> tensors;
    visit_tensors(model, [&](const std::string& n, const Matrix& t) {
      tensors.emplace_back(n, t);
    });
    std::string repr;
    for (auto& [n, t] : tensors) {
      repr += n;
      repr.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
    }
    return repr;
  }();
  EXPECT_EQ(before, after);
}

TEST(Train, ReducesValidationLossBelowUniform) {
  TransformerModel model = init_model(tiny_config());
  Corpus corpus = synthetic_corpus(16, 19);
  ParamSet params = collect_all_params(model);
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  cfg.val_every = 100;
  cfg.val_batches = 8;
  TrainMetrics metrics = train_loop(model, corpus, params, cfg);
  EXPECT_LT(metrics.final_val_loss, std::log(256.0));
  EXPECT_LT(metrics.final_val_loss, metrics.initial_val_loss);
  EXPECT_EQ(metrics.train_loss.size(), 200u);
}

TEST(Train, SameSeedReproducesLossHistory) {
  auto run = [] {
    TransformerModel model = init_model(tiny_config(23));
    Corpus corpus = synthetic_corpus(12, 23);
    ParamSet params = collect_all_params(model);
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 2;
    cfg.val_every = 10;
    cfg.val_batches = 2;
    return train_loop(model, corpus, params, cfg);
  };
  TrainMetrics a = run();
  TrainMetrics b = run();
  EXPECT_EQ(a.train_loss, b.train_loss);
  EXPECT_EQ(a.val_history, b.val_history);
}

TEST(Train, FrozenSubsetStaysFixedDuringTraining) {
  TransformerModel model = init_model(tiny_config(29));
  Corpus corpus = synthetic_corpus(12, 29);

  // Freeze everything except one block's FFN.
  ParamSet params;
  visit_tensors(model, [&](const std::string& name, Matrix& tensor) {
    bool trainable = name.rfind("blocks.0.ffn.", 0) == 0;
    params.add(name, &tensor, trainable);
  });
  Matrix frozen_before = model.embedding;
  Matrix trainable_before = std::get<GatedFfn>(model.blocks[0].ffn).w_g;

  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 2;
  cfg.val_every = 0;
  cfg.val_batches = 2;
  train_loop(model, corpus, params, cfg);

  EXPECT_EQ(model.embedding, frozen_before);
  EXPECT_NE(std::get<GatedFfn>(model.blocks[0].ffn).w_g, trainable_before);
}

TEST(Train, NanLossAborts) {
  TransformerModel model = init_model(tiny_config(31));
  model.embedding(0, 0) = std::numeric_limits<double>::infinity();
  Corpus corpus = synthetic_corpus(12, 31);
  ParamSet params = collect_all_params(model);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 2;
  cfg.val_every = 0;
  cfg.val_batches = 1;
  try {
    train_loop(model, corpus, params, cfg);
    FAIL() << "expected NaN abort";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNanLoss);
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Train, NoTrainableParamsRejected) {
  TransformerModel model = init_model(tiny_config(37));
  Corpus corpus = synthetic_corpus(12, 37);
  ParamSet params;
  visit_tensors(model, [&](const std::string& name, Matrix& tensor) {
    params.add(name, &tensor, false);
  });
  TrainConfig cfg;
  cfg.steps = 1;
  EXPECT_THROW(train_loop(model, corpus, params, cfg), Error);
}
