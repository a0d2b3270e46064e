#include <gtest/gtest.h>

#include "spruft/errors.hpp"
#include "spruft/pipeline.hpp"

using namespace spruft;

namespace {

SynthTask small_task(std::size_t dim) {
  SynthTaskSpec spec;
  spec.input_dim = dim;
  spec.train_size = 96;
  spec.val_size = 30;
  return make_synth_task(spec);
}

}  // namespace

TEST(Pipeline, ParseNames) {
  EXPECT_EQ(parse_method("sprufft-dep"), Method::sprufft_dep);
  EXPECT_EQ(parse_metric("qm-taylor"), Metric::qm_taylor);
  EXPECT_EQ(parse_aggregation("max"), GroupAggregation::max);
  EXPECT_THROW(parse_method("dora"), ConfigError);
  EXPECT_THROW(parse_metric("wanda"), ConfigError);
  for (auto m : {Metric::l2, Metric::taylor, Metric::qm_taylor, Metric::zo_taylor, Metric::random})
    EXPECT_EQ(parse_metric(to_string(m)), m);
}

TEST(Pipeline, SpecValidation) {
  const Model m = make_mlp({8, {6}, 3}, 1);
  SelectionSpec s;
  EXPECT_THROW(s.validate(m), ConfigError);
  s.rank = 2;
  s.ratio = 0.05;
  EXPECT_THROW(s.validate(m), ConfigError);
  s.ratio.reset();
  s.validate(m);
  s.layers = {"head"};
  EXPECT_THROW(s.validate(m), ConfigError);
  s.layers = {"nope"};
  EXPECT_THROW(s.validate(m), ConfigError);
  Model one = make_mlp({8, {6}, 1}, 1);
  SelectionSpec q;
  q.rank = 1;
  q.metric = Metric::qm_taylor;
  EXPECT_THROW(q.validate(one), ConfigError);
}

TEST(Pipeline, L2SelectionIsMagnitudeTopR) {
  const Model m = make_mlp({8, {10, 6}, 3}, 2);
  const auto task = small_task(8);
  SelectionSpec s;
  s.rank = 3;
  const auto p = prepare_target(m, task.train, s);
  ASSERT_EQ(p.target.adapters.rows.size(), 2u);
  EXPECT_EQ(p.selections.at("fc1"), select_top_r(magnitude_importance(m.linear("fc1")), 3));
  EXPECT_EQ(p.target.adapters.row_for("fc2")->selection, select_top_r(magnitude_importance(m.linear("fc2")), 3));
  EXPECT_EQ(p.target.trainable_base, head_parameters(m));
}

TEST(Pipeline, MethodsBuildExpectedTargets) {
  const Model m = make_transformer({2, 4, 8, 12, 3}, 3);
  const auto task = small_task(8);
  SelectionSpec s;
  s.rank = 2;
  s.method = Method::full;
  EXPECT_EQ(prepare_target(m, task.train, s).target.trainable_base.size(), m.parameter_names().size());
  s.method = Method::head;
  EXPECT_EQ(prepare_target(m, task.train, s).target.trainable_base, head_parameters(m));
  s.method = Method::lora;
  const auto lora = prepare_target(m, task.train, s);
  EXPECT_EQ(lora.target.adapters.loras.size(), 7u);
  EXPECT_TRUE(lora.target.adapters.rows.empty());
  s.method = Method::sprufft_dep;
  const auto dep = prepare_target(m, task.train, s);
  ASSERT_EQ(dep.groups.size(), 1u);
  EXPECT_EQ(dep.groups[0].selection.size(), 2u);
  EXPECT_EQ(dep.target.adapters.columns.size(), 4u);
  EXPECT_EQ(dep.target.adapters.column_for("block.q")->columns, dep.groups[0].selection);
  for (const auto& r : dep.target.adapters.rows) EXPECT_GE(r.selection.size(), 2u);
  dep.target.adapters.validate(m);
}

TEST(Pipeline, EveryMetricProducesValidSelections) {
  const Model m = make_mlp({8, {10}, 3}, 4);
  const auto task = small_task(8);
  for (auto metric : {Metric::l2, Metric::taylor, Metric::qm_taylor, Metric::zo_taylor, Metric::random}) {
    SelectionSpec s;
    s.ratio = 0.2;
    s.metric = metric;
    const auto p = prepare_target(m, task.train, s);
    EXPECT_EQ(p.selections.size(), 1u) << to_string(metric);
    EXPECT_EQ(prepare_target(m, task.train, s).selections.at("fc1"), p.selections.at("fc1")) << to_string(metric);
  }
}

TEST(Pipeline, RatioRowsAndLoraRanks) {
  const Model m = make_mlp({32, {128, 64}, 3}, 1);
  SelectionSpec s;
  s.ratio = 0.05;
  const auto rows = rows_per_layer(m, s);
  EXPECT_EQ(rows, allocate_rows(m, std::vector<std::string>{"fc1", "fc2"}, 0.05, true));
  s.method = Method::lora;
  const auto ranks = rows_per_layer(m, s);
  for (const auto& [l, r] : ranks) {
    const auto& lin = m.linear(l);
    const double lora_params = static_cast<double>(r * (lin.d_in() + lin.d_out()));
    EXPECT_NEAR(lora_params, static_cast<double>(rows.at(l) * lin.d_in()), static_cast<double>(lin.d_in() + lin.d_out()));
  }
}

TEST(ImportanceEngine, ColumnScoresMatchTransposedLayer) {
  const Model m = make_mlp({8, {10}, 3}, 5);
  const auto task = small_task(8);
  const ImportanceEngine e(m, task.train, Metric::l2, {"fc1"}, SpsaConfig{}, 1);
  EXPECT_EQ(e.scores("fc1", Orientation::columns), column_magnitude_importance(m.linear("fc1")).scores);
  const ImportanceEngine t(m, task.train, Metric::taylor, {"fc1"}, SpsaConfig{}, 1);
  EXPECT_EQ(t.scores("fc1"), taylor_importance(m, "fc1", task.train).scores);
  const ImportanceEngine q(m, task.train, Metric::qm_taylor, {"fc1"}, SpsaConfig{}, 1);
  const auto cs = classwise_taylor(m, "fc1", task.train);
  const auto qm = quantiles_mean(cs).scores;
  const auto got = q.scores("fc1");
  for (std::size_t r = 0; r < qm.size(); ++r) EXPECT_NEAR(got[r], qm[r], 1e-12);
}
