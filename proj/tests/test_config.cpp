#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cldta/config.hpp"

using namespace cldta;
using nlohmann::json;

TEST(RunConfig, DefaultsMatchTrainingSetup) {
  const RunConfig c = run_config_from_json(json::object());
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.model.n_layers, 4);
  EXPECT_EQ(c.model.d_model, 32);
  EXPECT_EQ(c.model.n_heads, 4);
  EXPECT_EQ(c.model.ffn_hidden, 64);
  EXPECT_EQ(c.model.dropout, 0.1);
  EXPECT_EQ(c.model.proj_dims, (std::array<int, 3>{128, 256, 128}));
  EXPECT_EQ(c.model.clf_hidden, (std::array<int, 2>{32, 32}));
  EXPECT_EQ(c.train.pretrain_lr, 1e-4);
  EXPECT_EQ(c.train.pretrain_batch, 256);
  EXPECT_EQ(c.train.pretrain_epochs, 30);
  EXPECT_EQ(c.train.weight_decay, 0.005);
  EXPECT_EQ(c.train.temperature, 0.5);
  EXPECT_EQ(c.train.calib_lr, 1e-5);
  EXPECT_EQ(c.train.calib_batch, 128);
  EXPECT_EQ(c.train.calib_epochs, 100);
  EXPECT_EQ(c.train.patience, 20);
}

TEST(RunConfig, ToJsonRoundTrips) {
  RunConfig c;
  c.seed = 7;
  c.protocol = "deap";
  c.model.d_model = 16;
  c.model.train_mask = DiagonalMask::zero_logit;
  c.train.calib_lr = 3e-4;
  c.augment.view_a = {Transform::mask, Transform::mixup};
  c.synth.mode = SynthMode::timeseries;
  c.eval.failure_mode = "neighbor";
  c.paths.bank = "b";
  const RunConfig back = run_config_from_json(to_json(c));
  EXPECT_EQ(back.seed, 7u);
  EXPECT_EQ(back.protocol, "deap");
  EXPECT_EQ(back.model, c.model);
  EXPECT_EQ(back.train, c.train);
  EXPECT_EQ(back.augment.view_a, c.augment.view_a);
  EXPECT_EQ(back.synth.mode, SynthMode::timeseries);
  EXPECT_EQ(back.eval, c.eval);
  EXPECT_EQ(back.paths, c.paths);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(run_config_from_json(json{{"sed", 1}}), InvalidArgument);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"d_modle", 8}}}}), InvalidArgument);
  EXPECT_THROW(run_config_from_json(json{{"paths", {{"bnak", "x"}}}}), InvalidArgument);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"d_model", "wide"}}}}), InvalidArgument);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"d_model", 30}}}}), InvalidArgument);  // 30 % 4 != 0
  EXPECT_THROW(run_config_from_json(json{{"model", {{"train_mask", "multiply"}}}}), InvalidArgument);
  EXPECT_THROW(run_config_from_json(json{{"augment", {{"view_a", {"rotate"}}}}}), InvalidArgument);
  EXPECT_THROW(run_config_from_json(json{{"protocol", "seed-v"}}), InvalidArgument);
  EXPECT_THROW(run_config_from_json(json{{"eval", {{"failure_mode", "drop"}}}}), InvalidArgument);
  EXPECT_THROW(run_config_from_json(json{{"train", {{"patience", 200}}}}), InvalidArgument);
}

TEST(RunConfig, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "cldta_config_test.json";
  std::ofstream(path) << R"({"seed": 5, "train": {"k_per_class": 4}})";
  const RunConfig c = load_run_config(path);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.train.k_per_class, 4);
  EXPECT_EQ(c.train_config().seed, 5u);
  EXPECT_EQ(c.synth_spec().seed, 5u);
  std::ofstream(path) << "{ broken";
  EXPECT_THROW(load_run_config(path), InvalidArgument);
  std::filesystem::remove(path);
  EXPECT_THROW(load_run_config(path), IoError);
}

TEST(ConfigHash, StableAndPathIndependent) {
  RunConfig a;
  const std::string h = config_hash(a);
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(h, config_hash(RunConfig{}));
  RunConfig b = a;
  b.paths.out = "/somewhere/else";
  b.paths.bank = "bank";
  EXPECT_EQ(config_hash(b), h);
  b.seed = 43;
  EXPECT_NE(config_hash(b), h);
  RunConfig c = a;
  c.train.calib_lr = 2e-5;
  EXPECT_NE(config_hash(c), h);
  EXPECT_EQ(config_hash(run_config_from_json(to_json(c))), config_hash(c));
}
