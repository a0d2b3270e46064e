#include <gtest/gtest.h>

#include <cmath>

#include "spruft/errors.hpp"
#include "spruft/trainer.hpp"
#include "test_support.hpp"

using namespace spruft;

namespace {

SynthTask blobs(double separation, std::uint64_t seed) {
  SynthTaskSpec spec;
  spec.input_dim = 8;
  spec.separation = separation;
  spec.seed = seed;
  return make_synth_task(spec);
}

double sgn(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

}  // namespace

TEST(Adam, ScalarOracleTwoSteps) {
  TrainConfig cfg;
  Tensor theta({1}, 0.5);
  AdamState state;
  const std::vector<NamedTensor> params{{"p", &theta}};
  const double lr = 0.1, g1 = 0.3, g2 = -0.2;
  adam_step(state, params, {{"p", Tensor({1}, g1)}}, lr, cfg);
  double expect = 0.5 - lr * g1 / (std::abs(g1) + cfg.adam_eps);
  EXPECT_NEAR(theta[0], expect, 1e-12);
  EXPECT_NEAR(theta[0], 0.5 - lr * sgn(g1), 1e-6);

  const double m = 0.9 * (0.1 * g1) + 0.1 * g2;
  const double v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  adam_step(state, params, {{"p", Tensor({1}, g2)}}, lr, cfg);
  expect -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  EXPECT_NEAR(theta[0], expect, 1e-12);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  TrainConfig cfg;
  Tensor theta({3}, 1.25);
  AdamState state;
  adam_step(state, {{"p", &theta}}, {{"p", Tensor({3})}}, 0.1, cfg);
  EXPECT_EQ(theta, Tensor({3}, 1.25));
  adam_step(state, {{"p", &theta}}, {}, 0.1, cfg);
  EXPECT_EQ(theta, Tensor({3}, 1.25));
}

TEST(Schedule, Boundaries) {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  EXPECT_DOUBLE_EQ(lr_at(cfg, 0, 100), 1e-3);
  EXPECT_NEAR(lr_at(cfg, 99, 100), 1e-9, 1e-20);
  EXPECT_GT(lr_at(cfg, 50, 100), lr_at(cfg, 51, 100));
  EXPECT_THROW(lr_at(cfg, 100, 100), ContractError);

  cfg.schedule = ScheduleKind::linear;
  const std::size_t total = 1000;
  const auto warmup = static_cast<std::size_t>(std::llround(0.03 * total));
  EXPECT_DOUBLE_EQ(lr_at(cfg, warmup, total), 1e-3);
  EXPECT_LT(lr_at(cfg, 0, total), lr_at(cfg, warmup - 1, total));
  EXPECT_LT(lr_at(cfg, warmup - 1, total), 1e-3);
  EXPECT_NEAR(lr_at(cfg, total - 1, total), 1e-3 * 0.01, 1e-15);

  cfg.schedule = ScheduleKind::constant;
  EXPECT_EQ(lr_at(cfg, 7, 10), 1e-3);
}

TEST(Synth, DeterministicAndShaped) {
  SynthTaskSpec spec;
  spec.class_weights = {0.7, 0.2, 0.1};
  const auto a = make_synth_task(spec);
  const auto b = make_synth_task(spec);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.val.labels, b.val.labels);
  EXPECT_EQ(a.train.size(), 600u);
  EXPECT_EQ(a.val.size(), 300u);
  std::vector<std::size_t> train_counts(3), val_counts(3);
  for (int l : a.train.labels) ++train_counts[l];
  for (int l : a.val.labels) ++val_counts[l];
  EXPECT_EQ(train_counts, (std::vector<std::size_t>{420, 120, 60}));
  EXPECT_EQ(val_counts, (std::vector<std::size_t>{100, 100, 100}));
  spec.seed = 1;
  EXPECT_NE(make_synth_task(spec).train.inputs, a.train.inputs);
  spec.class_weights = {1.0};
  EXPECT_THROW(make_synth_task(spec), ConfigError);
}

TEST(Train, ZeroEpochsIsNoOp) {
  Model m = make_mlp({8, {6}, 3}, 1);
  const Model before = m;
  const auto task = blobs(3.0, 1);
  TrainTarget t;
  t.trainable_base = {"fc1.weight"};
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto h = train(m, t, task.train, task.val, cfg);
  EXPECT_TRUE(h.epochs.empty());
  EXPECT_TRUE(h.step_losses.empty());
  EXPECT_EQ(m.linear("fc1").weight, before.linear("fc1").weight);
}

TEST(Train, FullCoverageMatchesFullFineTuning) {
  const Model base = make_mlp({8, {6}, 3}, 2);
  const auto task = blobs(2.0, 2);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 3;

  Model full_model = base;
  TrainTarget full;
  full.trainable_base = {"fc1.weight"};
  const auto hf = train(full_model, full, task.train, task.val, cfg);

  Model sp_model = base;
  TrainTarget sp;
  sp.adapters.rows.push_back(build_row_adapter(base.linear("fc1"), RowSelection::all(6)));
  const auto hs = train(sp_model, sp, task.train, task.val, cfg);

  ASSERT_EQ(hf.step_losses.size(), hs.step_losses.size());
  for (std::size_t i = 0; i < hf.step_losses.size(); ++i) EXPECT_NEAR(hf.step_losses[i], hs.step_losses[i], 1e-8);
  const Model merged = merge(sp_model, sp.adapters);
  EXPECT_LT(max_abs_diff(merged.linear("fc1").weight, full_model.linear("fc1").weight), 1e-8);
  EXPECT_EQ(sp_model.linear("fc1").weight, base.linear("fc1").weight);
}

TEST(Train, PeftLeavesBaseBitIdentical) {
  Model m = make_transformer({2, 4, 8, 12, 3}, 3);
  const Model before = m;
  SynthTaskSpec spec;
  spec.input_dim = 8;
  spec.train_size = 60;
  spec.val_size = 30;
  const auto task = make_synth_task(spec);
  TrainTarget t;
  t.adapters.rows.push_back(build_row_adapter(m.linear("block.fc1"), RowSelection({0, 3}, 12)));
  t.adapters.loras.push_back(build_lora_adapter(m.linear("block.q"), 2, 16.0, 0.1, 5));
  t.adapters.vectors.push_back(build_vector_adapter(m.norm("ln_f"), VectorField::shift, RowSelection({1}, 8)));
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-2;
  (void)train(m, t, task.train, task.val, cfg);
  for (const auto& name : m.parameter_names()) EXPECT_EQ(m.parameter(name), before.parameter(name)) << name;
  EXPECT_NE(t.adapters.rows[0].weight, Tensor({2, 8}));
}

TEST(Train, SeparableBlobsReachHighAccuracy) {
  Model m = make_mlp({8, {16}, 3}, 4);
  const auto task = blobs(10.0, 4);
  TrainTarget t;
  const auto names = m.parameter_names();
  t.trainable_base.insert(names.begin(), names.end());
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  const auto h = train(m, t, task.train, task.val, cfg);
  ASSERT_EQ(h.epochs.size(), 5u);
  EXPECT_GT(h.epochs.back().val_accuracy, 0.99);
}

TEST(Train, DefaultConfigOnSeparableBlobs) {
  Model m = make_mlp({8, {16}, 3}, 4);
  const auto task = blobs(6.0, 5);
  TrainTarget t;
  const auto names = m.parameter_names();
  t.trainable_base.insert(names.begin(), names.end());
  const auto h = train(m, t, task.train, task.val, TrainConfig{});
  EXPECT_GT(h.epochs.back().val_accuracy, 0.95);
}

TEST(Train, ZeroSeparationStaysNearChance) {
  Model m = make_mlp({8, {16}, 3}, 6);
  const auto task = blobs(0.0, 6);
  TrainTarget t;
  const auto names = m.parameter_names();
  t.trainable_base.insert(names.begin(), names.end());
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  const auto h = train(m, t, task.train, task.val, cfg);
  const double sigma = std::sqrt((1.0 / 3.0) * (2.0 / 3.0) / 300.0);
  EXPECT_LE(h.epochs.back().val_accuracy, 1.0 / 3.0 + 3.0 * sigma);
}

TEST(Train, DeterministicReruns) {
  auto run = [&] {
    Model m = make_transformer({2, 4, 8, 12, 3}, 7);
    SynthTaskSpec spec;
    spec.input_dim = 8;
    spec.train_size = 40;
    spec.val_size = 30;
    const auto t2 = make_synth_task(spec);
    TrainTarget t;
    t.adapters.loras.push_back(build_lora_adapter(m.linear("block.fc1"), 2, 16.0, 0.1, 5));
    TrainConfig cfg;
    cfg.epochs = 2;
    return std::pair{train(m, t, t2.train, t2.val, cfg).step_losses, t.adapters.loras[0].b};
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, HeadOnlyLossNonIncreasing) {
  Model m = make_mlp({8, {16}, 3}, 8);
  const auto task = blobs(3.0, 8);
  TrainTarget t;
  t.trainable_base = head_parameters(m);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 8;
  const auto h = train(m, t, task.train, task.val, cfg);
  for (std::size_t e = 1; e < h.epochs.size(); ++e) EXPECT_LE(h.epochs[e].train_loss, h.epochs[e - 1].train_loss);
}

TEST(Train, NonFiniteLossDiverges) {
  Model m = make_mlp({8, {6}, 3}, 9);
  auto task = blobs(3.0, 9);
  task.train.inputs(0, 0) = std::nan("");
  TrainTarget t;
  t.trainable_base = head_parameters(m);
  EXPECT_THROW(train(m, t, task.train, task.val, TrainConfig{}), DivergenceError);
}

TEST(Ratio, WithinOneRowOfBudget) {
  Model m = make_mlp({32, {128, 64}, 3}, 1);
  const std::vector<std::string> layers{"fc1", "fc2"};
  const auto rows = allocate_rows(m, layers, 0.05, true);
  std::size_t trainable = 0;
  for (const auto& name : head_parameters(m)) trainable += m.parameter(name).size();
  std::size_t widest = 0;
  for (const auto& [l, r] : rows) {
    trainable += r * m.linear(l).d_in();
    widest = std::max(widest, m.linear(l).d_in());
  }
  const double target = 0.05 * static_cast<double>(m.parameter_count());
  EXPECT_LE(std::abs(static_cast<double>(trainable) - target), static_cast<double>(widest));
  EXPECT_THROW(allocate_rows(m, layers, 0.0, true), ConfigError);
}
