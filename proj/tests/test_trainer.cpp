#include <gtest/gtest.h>

#include <filesystem>

#include "sewkit/trainer.hpp"

using namespace sewkit;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
  ModelConfig c = toy_config();
  c.num_classes = kDefaultClasses;
  c.max_edges = kDefaultMaxEdges;
  c.channels = kDefaultClasses;
  return c;
}

/// One small dataset shared by the suite.
const fs::path& dataset() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "sewkit_trainer_ds";
    fs::remove_all(d);
    DatasetConfig c;
    c.seed = 21;
    c.height = c.width = 16;
    for (const auto& t : templates()) c.counts[t.name] = 3;
    build_dataset(c, d);
    return d;
  }();
  return dir;
}

TrainConfig base_config(const std::string& run) {
  TrainConfig c;
  c.dataset = dataset();
  c.out = fs::temp_directory_path() / ("sewkit_trainer_" + run);
  fs::remove_all(c.out);
  c.model = small_model();
  c.steps = 4;
  c.batch_size = 3;
  c.seed = 5;
  return c;
}

double fixed_batch_loss(const Model<float>& m, const std::vector<TrainItem>& items) {
  std::vector<BatchEntry> batch;
  for (const auto& it : items) batch.push_back({&it, {}, 99});
  return batch_gradients(m, batch, LossWeights{}, StitchLossConfig{}).loss.total;
}

}  // namespace

TEST(TrainConfig, JsonRoundTripAndValidation) {
  auto c = base_config("json");
  c.augment = true;
  nlohmann::json j = c;
  auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.model, c.model);
  EXPECT_THROW(nlohmann::json::parse(R"({"stepz": 3})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"batch_size": 0})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"lr_embed": -1})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"loss_weights": {"lambda9": 1}})").get<TrainConfig>(), ConfigError);
  const auto d = nlohmann::json::parse("{}").get<TrainConfig>();
  EXPECT_EQ(d.lr_transformer, 1e-4);
  EXPECT_EQ(d.lr_embed, 1e-5);
  EXPECT_EQ(d.weight_decay, 1e-4);
  EXPECT_EQ(d.batch_size, 32);
  EXPECT_EQ(d.weights.lambda1, 10.0);
  EXPECT_EQ(d.weights.lambda2, 0.5);
  EXPECT_EQ(d.weights.lambda3, 1.0);
}

TEST(Train, ZeroStepsWritesInitialParameters) {
  auto c = base_config("zero");
  c.steps = 0;
  const auto r = train(c);
  EXPECT_EQ(read_file(r.checkpoint), model_checkpoint(init_params<float>(c.model, c.seed), 0));
}

TEST(Train, IdenticalRunsGiveIdenticalCheckpoints) {
  auto a = base_config("det_a"), b = base_config("det_b");
  a.augment = b.augment = true;
  b.workers = 3;
  const auto ra = train(a), rb = train(b);
  EXPECT_EQ(read_file(ra.checkpoint), read_file(rb.checkpoint));
  auto c = base_config("det_c");
  c.augment = true;
  c.seed = 6;
  EXPECT_NE(read_file(train(c).checkpoint), read_file(ra.checkpoint));
}

TEST(Train, LogHasOneRecordPerStep) {
  auto c = base_config("log");
  c.checkpoint_every = 2;
  c.eval_every = 2;
  const auto r = train(c);
  std::ifstream in(r.log);
  std::string line;
  int steps = 0, evals = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("eval_train")) {
      ++evals;
      continue;
    }
    EXPECT_EQ(j.at("step").get<int>(), ++steps);
    for (const char* k : {"shape", "loop", "rt", "stitch", "pose", "padding", "total", "grad_norm", "wall"})
      EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(steps, 4);
  EXPECT_EQ(evals, 2);
  EXPECT_TRUE(fs::exists(c.out / "step_2.ckpt"));
  EXPECT_TRUE(fs::exists(c.out / "step_4.ckpt"));
}

TEST(Train, ZeroTransformerRateFreezesEverythingButTheEmbedding) {
  auto c = base_config("freeze");
  c.steps = 10;
  c.lr_transformer = 0.0;
  c.lr_embed = 1e-2;
  const auto init = init_params<float>(c.model, c.seed);
  const auto trained = load_model_file(train(c).checkpoint).model;
  for (std::size_t i = 0; i < init.params.size(); ++i) {
    const auto& p = init.params[i];
    if (p.group == ParamGroup::embed) EXPECT_NE(p.value.data, trained.params[i].value.data) << p.name;
    else EXPECT_EQ(p.value.data, trained.params[i].value.data) << p.name;
  }
}

TEST(Train, FiftyStepsOnAFrozenBatchReduceTheLoss) {
  const Dataset ds(dataset());
  const std::vector<int> ids(ds.manifest().train.begin(), ds.manifest().train.begin() + 4);
  const auto items = load_items(ds, ids, small_model());
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto m = init_params<float>(small_model(), seed);
    const double before = fixed_batch_loss(m, items);
    AdamW<float> opt(m.params);
    for (int step = 0; step < 50; ++step) {
      std::vector<BatchEntry> batch;
      for (std::size_t i = 0; i < items.size(); ++i) batch.push_back({&items[i], {}, mix_seed(seed, step * 4 + i)});
      auto r = batch_gradients(m, batch, LossWeights{}, StitchLossConfig{});
      clip_gradients(r.grads, 1.0);
      opt.step(m.params, r.grads, 1e-3, 1e-4, 1e-4);
    }
    improved += fixed_batch_loss(m, items) < before;
  }
  EXPECT_GE(improved, 9);
}

TEST(Train, WorkersMatchReferenceLoss) {
  const Dataset ds(dataset());
  const auto items = load_items(ds, ds.manifest().train, small_model());
  const auto m = init_params<float>(small_model(), 3);
  std::vector<BatchEntry> batch;
  for (std::size_t i = 0; i < items.size(); ++i) batch.push_back({&items[i], {}, i});
  const auto ref = batch_gradients(m, batch, LossWeights{}, StitchLossConfig{}, 1);
  const auto par = batch_gradients(m, batch, LossWeights{}, StitchLossConfig{}, 4);
  EXPECT_NEAR(par.loss.total, ref.loss.total, 1e-6 * std::abs(ref.loss.total));
  EXPECT_EQ(par.grads, ref.grads);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = init_params<float>(small_model(), seed);
    const auto bytes = model_checkpoint(m, 7);
    const auto loaded = load_model_checkpoint(bytes);
    EXPECT_EQ(loaded.step, 7);
    EXPECT_EQ(loaded.model.config, m.config);
    EXPECT_EQ(model_checkpoint(loaded.model, loaded.step), bytes);
  }
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto bytes = model_checkpoint(init_params<float>(small_model(), 1), 0);
  bytes[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(load_model_checkpoint(bytes), CheckpointCorrupt);
  EXPECT_THROW(load_model_checkpoint(std::string_view("SEWCKPT1")), CheckpointCorrupt);
}

TEST(Train, Errors) {
  auto c = base_config("errors");
  c.dataset = fs::temp_directory_path() / "sewkit_no_such_dataset";
  EXPECT_THROW(train(c), DatasetMissing);

  auto broken = fs::temp_directory_path() / "sewkit_trainer_nan";
  fs::remove_all(broken);
  fs::copy(dataset(), broken, fs::copy_options::recursive);
  const DatasetPaths paths{broken};
  const Dataset ds(broken);
  for (int id : ds.manifest().train) {
    auto r = decode_raster(read_file(paths.raster(id)));
    std::fill(r.data.begin(), r.data.end(), std::numeric_limits<float>::quiet_NaN());
    write_file_atomic(paths.raster(id), encode_raster(r));
  }
  c.dataset = broken;
  EXPECT_THROW(train(c), NonFiniteLoss);
  std::ifstream in(c.out / "train_log.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  EXPECT_EQ(nlohmann::json::parse(line).at("step"), 1);

  c = base_config("mismatch");
  c.model.height = 32;
  c.model.width = 32;
  EXPECT_THROW(train(c), ConfigError);
}

TEST(Eval, GroundTruthIsPerfectAndInitialModelIsFinite) {
  EXPECT_TRUE(eval_ground_truth(dataset(), "test").perfect());
  auto c = base_config("eval");
  c.steps = 0;
  const auto r = eval_checkpoint(train(c).checkpoint, dataset(), "test");
  EXPECT_EQ(r.n_patterns, static_cast<int>(Dataset(dataset()).manifest().test.size()));
  for (double v : {r.panel_l2, r.rot_l2, r.trans_l2, r.stitch_f1}) EXPECT_TRUE(std::isfinite(v));
  EXPECT_LE(r.num_panel_acc, 0.5);
}

TEST(Seed, EnvironmentOverride) {
  ::unsetenv("SEWKIT_SEED");
  EXPECT_EQ(seed_override(4), 4u);
  ::setenv("SEWKIT_SEED", "17", 1);
  EXPECT_EQ(seed_override(4), 17u);
  ::setenv("SEWKIT_SEED", "x1", 1);
  EXPECT_THROW(seed_override(4), ConfigError);
  ::unsetenv("SEWKIT_SEED");
}

TEST(Augment, KeepsShapeAndOccupancyScale) {
  Raster r(2, 16, 16);
  for (int y = 4; y < 12; ++y)
    for (int x = 4; x < 12; ++x) r.at(1, y, x) = 1.0f;
  Rng rng(3);
  const auto out = augment_raster(r.data, 2, 16, 16, rng);
  ASSERT_EQ(out.size(), r.data.size());
  double s0 = 0, s1 = 0;
  for (std::size_t i = 0; i < 256; ++i) s0 += out[i], s1 += out[256 + i];
  EXPECT_EQ(s0, 0.0);
  EXPECT_NEAR(s1, 64.0, 16.0);
}
