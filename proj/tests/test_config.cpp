#include "igpk/config.hpp"

#include <gtest/gtest.h>

#include <sstream>

namespace igpk {
namespace {

TEST(RunConfigParse, ReadsDocumentedKeys) {
  std::istringstream is(
      "# toy profile\n"
      "n_layers = 4\n"
      "d_model=64\n"
      "d_ff = 128\n"
      "vocab_size = 32\n"
      "total_steps = 2000\n"
      "probe_steps = 20\n"
      "batch_size = 4\n"
      "learning_rate = 0.1\n"
      "epochs = 1\n"
      "mode = lora\n"
      "seed = 7\n"
      "task = copy-sequence\n"
      "data_size = 256\n"
      "seq_len = 16\n"
      "prune_count = 2\n"
      "merge_count = 1\n"
      "sparsity_p = 0.8\n"
      "strategy = sign-sum\n"
      "protect = 0,3\n");
  RunConfig cfg;
  parse_run_config(is, cfg);
  cfg.finalize();
  EXPECT_EQ(cfg.model.n_layers, 4);
  EXPECT_EQ(cfg.model.d_model, 64);
  EXPECT_EQ(cfg.train.total_steps, 2000);
  EXPECT_EQ(cfg.train.probe_steps, 20);
  EXPECT_EQ(cfg.train.batch_size, 4);
  EXPECT_EQ(cfg.train.mode, TrainMode::lora);
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.task.kind, TaskKind::copy_sequence);
  EXPECT_EQ(cfg.task.vocab_size, 32);  // mirrored from the model
  EXPECT_EQ(cfg.prune_count, 2);
  EXPECT_EQ(cfg.merge_count, 1);
  EXPECT_EQ(cfg.protect, (std::set<int>{0, 3}));
  EXPECT_DOUBLE_EQ(cfg.merge.sparsity_p, 0.8);
}

TEST(RunConfigParse, RejectsUnknownKeysAndBadValues) {
  RunConfig cfg;
  std::istringstream unknown("frobnicate = 3\n");
  EXPECT_THROW(parse_run_config(unknown, cfg), ConfigError);
  std::istringstream bad_int("n_layers = four\n");
  EXPECT_THROW(parse_run_config(bad_int, cfg), ConfigError);
  std::istringstream no_eq("n_layers 4\n");
  EXPECT_THROW(parse_run_config(no_eq, cfg), ConfigError);
}

TEST(RunConfigParse, CrossFieldValidation) {
  RunConfig cfg;
  cfg.train.total_steps = 10;
  cfg.train.probe_steps = 20;
  EXPECT_THROW(cfg.finalize(), ConfigError);

  RunConfig cfg2;
  cfg2.merge_count = 2;
  cfg2.prune_count = 1;
  EXPECT_THROW(cfg2.finalize(), ConfigError);

  RunConfig cfg3;
  cfg3.task.seq_len = 64;
  cfg3.model.max_seq = 32;
  EXPECT_THROW(cfg3.finalize(), ConfigError);
}

TEST(RunConfigParse, SeedDerivationsAreStableAndDistinct) {
  RunConfig a, b;
  a.seed = b.seed = 99;
  EXPECT_EQ(a.model_seed(), b.model_seed());
  EXPECT_EQ(a.data_seed(), b.data_seed());
  EXPECT_NE(a.model_seed(), a.data_seed());
  EXPECT_NE(a.model_seed(), a.train_seed());
}

TEST(StepsFromFraction, ExactFractionsBehaveAsWritten) {
  EXPECT_EQ(steps_from_fraction(0.01, 2000), 20);
  EXPECT_EQ(steps_from_fraction(0.0002, 2000), 1);
  EXPECT_EQ(steps_from_fraction(1.0, 2000), 2000);
  EXPECT_EQ(steps_from_fraction(0.0005, 2000), 1);
  EXPECT_EQ(steps_from_fraction(0.5, 3), 2);
  EXPECT_THROW(steps_from_fraction(0.0, 100), ConfigError);
  EXPECT_THROW(steps_from_fraction(1.5, 100), ConfigError);
}

}  // namespace
}  // namespace igpk
