#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "flexdepth/checkpoint.hpp"
#include "flexdepth/training.hpp"

namespace flexdepth {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("flexdepth_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig small_config(int n, int m) {
  ModelConfig c;
  c.enc_layers = n;
  c.dec_layers = m;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.vocab_size = 14;
  c.max_len = 16;
  c.dropout = 0.0f;
  c.label_smoothing = 0.1f;
  return c;
}

Batch sample_batch(std::uint64_t seed) {
  GenerateOptions g;
  g.task = Task::kSynthTranslate;
  g.size = 6;
  g.min_len = 2;
  g.max_len = 6;
  g.vocab_size = 10;
  g.seed = seed;
  const Corpus corpus = generate(g);
  BatchOptions opt;
  opt.batch_size = 6;
  opt.shuffle = false;
  return batches(corpus, build_vocab(corpus), opt).front();
}

std::vector<float> flat(const ModelParams& p) {
  std::vector<float> out;
  p.for_each_parameter([&](const std::string&, const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

TEST(VanillaLoss, ZeroParamsGiveLogV) {
  auto c = small_config(2, 2);
  c.label_smoothing = 0.0f;
  const auto params = zero_params(c);
  auto ctx = ForwardContext::inference();
  EXPECT_NEAR(vanilla_loss(params, sample_batch(1), ctx).item(), std::log(14.0), 1e-5);
}

TEST(NxMLoss, ZeroParamsGiveLogVEverywhere) {
  auto c = small_config(2, 3);
  c.label_smoothing = 0.0f;
  const auto params = zero_params(c);
  auto ctx = ForwardContext::inference();
  const auto grid = nxm_loss(params, sample_batch(1), ctx);
  for (int i = 1; i <= 2; ++i) {
    for (int j = 1; j <= 3; ++j) EXPECT_NEAR(grid.value(i, j), std::log(14.0), 1e-5);
  }
  EXPECT_NEAR(grid.aggregate.item(), std::log(14.0), 1e-5);
}

TEST(NxMLoss, SingleLayerReducesToVanilla) {
  const auto params = init_params(small_config(1, 1), 4);
  const Batch batch = sample_batch(2);
  auto c1 = ForwardContext::inference();
  auto c2 = ForwardContext::inference();
  const float grid = nxm_loss(params, batch, c1).aggregate.item();
  const float vanilla = vanilla_loss(params, batch, c2).item();
  EXPECT_EQ(grid, vanilla);
}

TEST(NxMLoss, CellsMatchTruncatedStacks) {
  const auto params = init_params(small_config(2, 2), 7);
  const Batch batch = sample_batch(3);
  auto ctx = ForwardContext::inference();
  const auto grid = nxm_loss(params, batch, ctx);
  double mean = 0.0;
  for (int i = 1; i <= 2; ++i) {
    for (int j = 1; j <= 2; ++j) {
      auto oc = ForwardContext::inference();
      const double oracle = vanilla_loss(params.truncated(i, j), batch, oc).item();
      EXPECT_NEAR(grid.value(i, j), oracle, 1e-5 * std::abs(oracle));
      mean += oracle / 4.0;
    }
  }
  EXPECT_NEAR(grid.aggregate.item(), mean, 1e-6);
}

TEST(NxMLoss, WeightsAreNormalized) {
  const auto params = init_params(small_config(2, 1), 7);
  const Batch batch = sample_batch(3);
  auto ctx = ForwardContext::inference();
  const std::vector<double> weights{1.0, 3.0};
  const auto grid = nxm_loss(params, batch, ctx, weights);
  EXPECT_NEAR(grid.aggregate.item(), 0.25 * grid.value(1, 1) + 0.75 * grid.value(2, 1), 1e-6);
  const std::vector<double> wrong{1.0};
  EXPECT_THROW(nxm_loss(params, batch, ctx, wrong), ConfigError);
}

TEST(GradientReach, SupportIsExactlyTheLowerLayers) {
  auto params = init_params(small_config(3, 3), 10);
  const Batch batch = sample_batch(5);
  for (int i = 1; i <= 3; ++i) {
    for (int j = 1; j <= 3; ++j) {
      auto ctx = ForwardContext::inference();
      const auto r = gradient_reach(params, batch, ctx, i, j);
      EXPECT_TRUE(r.embedding);
      for (int k = 1; k <= 3; ++k) {
        EXPECT_EQ(r.encoder[k - 1], k <= i) << "keep (" << i << "," << j << ") encoder " << k;
        EXPECT_EQ(r.decoder[k - 1], k <= j) << "keep (" << i << "," << j << ") decoder " << k;
      }
    }
  }
}

TEST(Noam, WarmupThenInverseSquareRoot) {
  const double peak = noam_learning_rate(1.0, 64, 400, 400);
  EXPECT_NEAR(peak, 1.0 / 8.0 / 20.0, 1e-12);
  EXPECT_NEAR(noam_learning_rate(1.0, 64, 400, 100), peak / 4.0, 1e-12);
  EXPECT_NEAR(noam_learning_rate(1.0, 64, 400, 1600), peak / 2.0, 1e-12);
  EXPECT_NEAR(noam_learning_rate(2.0, 64, 400, 1600), peak, 1e-12);
}

TEST(Adam, FirstStepMovesBySignTimesRate) {
  Tensor w({3}, {1.0f, 1.0f, 1.0f}, true);
  Adam adam({w}, 0.9, 0.997, 1e-9);
  sum(mul(w, Tensor({3}, {2.0f, -0.5f, 0.0f}))).backward();
  adam.step(0.1);
  EXPECT_NEAR(w.data()[0], 0.9f, 1e-6);
  EXPECT_NEAR(w.data()[1], 1.1f, 1e-6);
  EXPECT_EQ(w.data()[2], 1.0f);
  EXPECT_FALSE(w.has_grad());
}

TEST(Trainer, LossDecreasesOnAFixedBatch) {
  auto params = init_params(small_config(2, 2), 3);
  TrainConfig cfg;
  cfg.warmup_steps = 20;
  cfg.base_scale = 0.5;
  cfg.checkpoint_every = 1;
  Trainer trainer(params, cfg);
  const Batch batch = sample_batch(9);
  const float first = trainer.step(batch);
  float last = first;
  for (int s = 0; s < 60; ++s) last = trainer.step(batch);
  EXPECT_LT(last, 0.5f * first);
}

Corpus small_corpus() {
  GenerateOptions g;
  g.task = Task::kCopy;
  g.size = 40;
  g.min_len = 2;
  g.max_len = 6;
  g.vocab_size = 10;
  g.seed = 3;
  return generate(g);
}

TEST(Train, ZeroStepsWritesNothing) {
  const auto dir = scratch_dir("zero");
  const Corpus corpus = small_corpus();
  auto params = init_params(small_config(2, 2), 1);
  TrainConfig cfg;
  cfg.steps = 0;
  const auto result = train(params, corpus, build_vocab(corpus), cfg, dir);
  EXPECT_TRUE(result.checkpoints.empty());
  EXPECT_TRUE(result.log.empty());
  EXPECT_TRUE(latest_checkpoints(dir, 10).empty());
  EXPECT_EQ(fs::file_size(dir / "train.log"), 0u);
  fs::remove_all(dir);
}

TEST(Train, SameSeedGivesBitIdenticalCheckpoints) {
  const Corpus corpus = small_corpus();
  const Vocab vocab = build_vocab(corpus);
  TrainConfig cfg;
  cfg.steps = 12;
  cfg.batch_size = 8;
  cfg.checkpoint_every = 4;
  cfg.keep_last = 2;
  auto run = [&](const std::string& name) {
    const auto dir = scratch_dir(name);
    auto c = small_config(2, 2);
    c.dropout = 0.1f;
    auto params = init_params(c, 5);
    const auto result = train(params, corpus, vocab, cfg, dir);
    EXPECT_EQ(result.checkpoints.size(), 2u);
    EXPECT_EQ(result.log.size(), 3u);
    std::ifstream in(result.checkpoints.back(), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    fs::remove_all(dir);
    return std::make_pair(bytes, result.log);
  };
  const auto a = run("det_a");
  const auto b = run("det_b");
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, UnwritableDirectoryFailsBeforeTraining) {
  const auto dir = scratch_dir("blocked");
  std::ofstream(dir / "file") << "x";
  const Corpus corpus = small_corpus();
  auto params = init_params(small_config(1, 1), 1);
  const auto before = flat(params);
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.checkpoint_every = 2;
  EXPECT_THROW(train(params, corpus, build_vocab(corpus), cfg, dir / "file" / "sub"), IoError);
  EXPECT_EQ(flat(params), before);
  fs::remove_all(dir);
}

TEST(Train, VocabularyMismatchIsConfigError) {
  const auto dir = scratch_dir("vocab");
  const Corpus corpus = small_corpus();
  auto params = init_params(small_config(1, 1), 1);
  params.config.vocab_size = 20;
  TrainConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(train(params, corpus, build_vocab(corpus), cfg, dir), ConfigError);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = scratch_dir("ckpt");
  const auto params = init_params(small_config(2, 3), 8);
  save_checkpoint(dir / "a.bin", params, 77);
  const Checkpoint loaded = load_checkpoint(dir / "a.bin");
  EXPECT_EQ(loaded.step, 77);
  EXPECT_EQ(loaded.params.config, params.config);
  EXPECT_EQ(flat(loaded.params), flat(params));
  EXPECT_EQ(flat(average_checkpoints({dir / "a.bin"})), flat(params));
  fs::remove_all(dir);
}

TEST(Checkpoint, AverageOfZerosAndTwosIsOnes) {
  const auto dir = scratch_dir("avg");
  auto zeros = zero_params(small_config(1, 2));
  auto twos = zero_params(small_config(1, 2));
  twos.for_each_parameter([](const std::string&, Tensor& t) {
    for (auto& v : t.mutable_data()) v = 2.0f;
  });
  save_checkpoint(dir / "0.bin", zeros);
  save_checkpoint(dir / "2.bin", twos);
  for (float v : flat(average_checkpoints({dir / "0.bin", dir / "2.bin"}))) EXPECT_EQ(v, 1.0f);
  fs::remove_all(dir);
}

TEST(Checkpoint, IdenticalCheckpointsAverageToThemselves) {
  const auto dir = scratch_dir("idem");
  const auto params = init_params(small_config(2, 2), 12);
  std::vector<fs::path> paths;
  for (int k = 0; k < 5; ++k) {
    paths.push_back(dir / ("c" + std::to_string(k) + ".bin"));
    save_checkpoint(paths.back(), params);
  }
  const auto avg = flat(average_checkpoints(paths));
  const auto orig = flat(params);
  ASSERT_EQ(avg.size(), orig.size());
  for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_FLOAT_EQ(avg[i], orig[i]);
  fs::remove_all(dir);
}

TEST(Checkpoint, ConfigMismatchNamesTheField) {
  const auto dir = scratch_dir("mismatch");
  save_checkpoint(dir / "a.bin", init_params(small_config(2, 2), 1));
  save_checkpoint(dir / "b.bin", init_params(small_config(2, 3), 1));
  try {
    average_checkpoints({dir / "a.bin", dir / "b.bin"});
    FAIL() << "expected IncompatibilityError";
  } catch (const IncompatibilityError& e) {
    EXPECT_NE(std::string(e.what()).find("dec_layers"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptFileIsRejected) {
  const auto dir = scratch_dir("corrupt");
  std::ofstream(dir / "bad.bin", std::ios::binary) << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir / "bad.bin"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "absent.bin"), IoError);
  fs::remove_all(dir);
}

TEST(Checkpoint, LatestCheckpointsKeepsNewest) {
  const auto dir = scratch_dir("latest");
  const auto params = init_params(small_config(1, 1), 1);
  for (int s : {100, 300, 200, 400}) save_checkpoint(checkpoint_path(dir, s), params, s);
  const auto last = latest_checkpoints(dir, 2);
  ASSERT_EQ(last.size(), 2u);
  EXPECT_EQ(last[0], checkpoint_path(dir, 300));
  EXPECT_EQ(last[1], checkpoint_path(dir, 400));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace flexdepth
