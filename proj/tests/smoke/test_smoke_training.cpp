#include <gtest/gtest.h>

#include <filesystem>

#include "flexdepth/training.hpp"

namespace flexdepth {
namespace {

// Desk configuration on the copy task, full 5000 steps.
TEST(SmokeTraining, CopyTaskLossFallsBelowOneFifth) {
  const auto dir = std::filesystem::temp_directory_path() / "flexdepth_smoke_copy";
  std::filesystem::remove_all(dir);
  GenerateOptions g;
  g.task = Task::kCopy;
  g.size = 20000;
  g.seed = 1;
  const Corpus corpus = generate(g);
  const Vocab vocab = build_vocab(corpus);
  ModelConfig model;
  model.vocab_size = static_cast<int>(vocab.size());
  auto params = init_params(model, 1);
  const TrainConfig cfg;
  const auto result = train(params, corpus, vocab, cfg, dir);
  ASSERT_FALSE(result.log.empty());
  const double final_loss = result.log.back().second;
  std::printf("initial loss %.4f, final interval loss %.4f, %.0f s\n", result.first_loss, final_loss,
              result.seconds);
  EXPECT_LT(final_loss, 0.2 * result.first_loss);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace flexdepth
