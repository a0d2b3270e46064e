#include <gtest/gtest.h>

#include "spruft/memory.hpp"
#include "test_support.hpp"

using namespace spruft;
using testing_support::random_tensor;

namespace {

LabeledBatch batch_for(const Model& m, std::size_t b, std::uint64_t seed) {
  RngStream rng(seed);
  LabeledBatch batch{random_tensor({b, m.input_dim}, rng), {}};
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<int>(i % m.num_classes));
  return batch;
}

const MemoryComponents& row_of(const MemoryReport& r, const std::string& layer) {
  for (const auto& l : r.layers)
    if (l.layer == layer) return l;
  throw std::runtime_error("no row " + layer);
}

}  // namespace

TEST(Memory, AllFrozenIsInferenceOnly) {
  const Model m = make_mlp({6, {8}, 3}, 1);
  const auto r = measure_training_footprint(m, {"frozen", {}, {}}, batch_for(m, 4, 2));
  EXPECT_EQ(r.totals.mem_ft, 0u);
  EXPECT_EQ(r.totals.mem_opt, 0u);
  EXPECT_EQ(r.totals.mem_aux(), 0u);
  EXPECT_EQ(r.totals.mem_model, m.parameter_count());
  EXPECT_EQ(r.totals.total(), m.parameter_count());
}

TEST(Memory, RowAdapterAdamBookkeeping) {
  const Model m = make_mlp({6, {8}, 3}, 1);
  TrainingSetup s{"rows", {}, {}};
  s.adapters.rows.push_back(build_row_adapter(m.linear("fc1"), RowSelection({1, 2, 5}, 8)));
  const auto r = measure_training_footprint(m, s, batch_for(m, 4, 2));
  EXPECT_EQ(r.totals.trainable_params, 3u * 6u);
  EXPECT_EQ(r.totals.mem_ft, 2u * 3u * 6u);
  EXPECT_EQ(r.totals.mem_opt, 2u * 3u * 6u);
  EXPECT_EQ(r.totals.mem_model, m.parameter_count());
}

TEST(Memory, LoraMinusSpruftIsRankPlusMask) {
  const Model m = make_mlp({6, {8}, 3}, 1);
  const std::size_t b = 5, r = 2;
  TrainingSetup sp{"sprufft", {}, {}};
  sp.adapters.rows.push_back(build_row_adapter(m.linear("fc1"), RowSelection({0, 4}, 8)));
  TrainingSetup lo{"lora", {}, {}};
  lo.adapters.loras.push_back(build_lora_adapter(m.linear("fc1"), r, 16.0, 0.1, 3));
  const auto cmp = compare_configurations(m, lo, sp, batch_for(m, b, 4), 7);
  EXPECT_EQ(cmp.aux_delta(), static_cast<long long>(b * r + b * 6));
  for (const auto& l : cmp.layers) {
    if (l.layer == "fc1") EXPECT_EQ(l.aux_delta(), static_cast<long long>(b * r + b * 6));
    else EXPECT_EQ(l.aux_delta(), 0);
  }
  EXPECT_EQ(row_of(measure_training_footprint(m, lo, batch_for(m, b, 4), 7), "fc1").aux_dropout, b * 6);
  EXPECT_NE(cmp.summary().find("sprufft caches"), std::string::npos);
}

TEST(Memory, IdenticalConfigurationsHaveZeroDelta) {
  const Model m = make_transformer({2, 4, 8, 12, 3}, 2);
  TrainingSetup s{"a", {}, {}};
  s.adapters.rows.push_back(build_row_adapter(m.linear("block.fc1"), RowSelection({0, 1}, 12)));
  const auto cmp = compare_configurations(m, s, s, batch_for(m, 3, 5));
  EXPECT_EQ(cmp.aux_delta(), 0);
  for (const auto& l : cmp.layers) EXPECT_EQ(l.aux_delta(), 0);
  EXPECT_NE(cmp.summary().find("same number"), std::string::npos);
}

TEST(Memory, ConservationAndMonotonicity) {
  const Model m = make_transformer({2, 4, 8, 12, 3}, 2);
  const auto batch = batch_for(m, 3, 5);
  TrainingSetup s{"grow", {}, {}};
  MemoryComponents previous = measure_training_footprint(m, s, batch).totals;
  auto add_and_check = [&] {
    const auto r = measure_training_footprint(m, s, batch, 9);
    MemoryComponents sum{"sum"};
    for (const auto& l : r.layers) sum += l;
    EXPECT_EQ(sum.total(), r.totals.total());
    EXPECT_EQ(sum.mem_aux(), r.totals.mem_aux());
    EXPECT_EQ(sum.trainable_params, r.totals.trainable_params);
    EXPECT_GE(r.totals.mem_model, 0u);
    EXPECT_GE(r.totals.mem_ft, previous.mem_ft);
    EXPECT_GE(r.totals.mem_opt, previous.mem_opt);
    EXPECT_GE(r.totals.aux_activation, previous.aux_activation);
    EXPECT_GE(r.totals.aux_dropout, previous.aux_dropout);
    previous = r.totals;
  };
  s.adapters.rows.push_back(build_row_adapter(m.linear("block.fc2"), RowSelection({0, 1}, 8)));
  add_and_check();
  s.adapters.rows.push_back(build_row_adapter(m.linear("block.q"), RowSelection({3}, 8)));
  add_and_check();
  s.adapters.loras.push_back(build_lora_adapter(m.linear("block.v"), 2, 16.0, 0.1, 1));
  add_and_check();
  s.adapters.vectors.push_back(build_vector_adapter(m.norm("ln_f"), VectorField::gain, RowSelection({0}, 8)));
  add_and_check();
}

TEST(Memory, SpruftTraceHasNoRowBranchEntries) {
  const Model m = make_transformer({2, 4, 8, 12, 3}, 2);
  TrainingSetup s{"sprufft", {}, {}};
  for (const auto& info : m.linear_layers()) {
    if (info.role == LayerRole::head) continue;
    s.adapters.rows.push_back(build_row_adapter(m.linear(info.id), RowSelection({0, 1}, info.d_out)));
  }
  const auto r = measure_training_footprint(m, s, batch_for(m, 3, 5));
  EXPECT_GT(r.ledger.size(), 0u);
  for (const auto& e : r.ledger) {
    EXPECT_EQ(e.label.find("row_branch"), std::string::npos) << e.label;
    EXPECT_NE(e.kind, CacheKind::dropout_mask);
  }
}

TEST(Memory, SpruftCachesLessThanLoraOnToyTransformer) {
  const Model m = make_transformer({4, 8, 32, 64, 3}, 3);
  const auto batch = batch_for(m, 8, 6);
  TrainingSetup sp{"sprufft", {}, {}}, lo{"lora", {}, {}};
  for (const auto& info : m.linear_layers()) {
    if (info.role == LayerRole::head) continue;
    std::vector<std::size_t> idx{0, 1, 2, 3};
    sp.adapters.rows.push_back(build_row_adapter(m.linear(info.id), RowSelection(idx, info.d_out)));
    lo.adapters.loras.push_back(build_lora_adapter(m.linear(info.id), 2, 16.0, 0.1, 4));
  }
  const auto a = measure_training_footprint(m, sp, batch, 1).totals;
  const auto b = measure_training_footprint(m, lo, batch, 1).totals;
  EXPECT_LT(a.mem_aux(), b.mem_aux());
}

TEST(Memory, TableHasHeaderLayersAndTotal) {
  const Model m = make_mlp({6, {8}, 3}, 1);
  TrainingSetup s{"rows", {}, {}};
  s.adapters.rows.push_back(build_row_adapter(m.linear("fc1"), RowSelection({1}, 8)));
  const auto r = measure_training_footprint(m, s, batch_for(m, 4, 2));
  const auto table = format_memory_table(r);
  EXPECT_EQ(table.rfind("layer", 0), 0u);
  EXPECT_NE(table.find("mem_aux"), std::string::npos);
  EXPECT_NE(table.find("\ntotal"), std::string::npos);
  EXPECT_NE(table.find("fc1"), std::string::npos);
}
