#include <gtest/gtest.h>

#include <filesystem>

#include "spruft/errors.hpp"
#include "spruft/serialization.hpp"
#include "test_support.hpp"

using namespace spruft;
using testing_support::random_tensor;

namespace {

void expect_same_parameters(const Model& a, const Model& b) {
  ASSERT_EQ(a.parameter_names(), b.parameter_names());
  for (const auto& name : a.parameter_names()) EXPECT_EQ(a.parameter(name), b.parameter(name)) << name;
}

}  // namespace

TEST(Serialization, MlpRoundTripIsExact) {
  Model m = make_mlp({6, {5, 4}, 3}, 12);
  m.zero_input_columns = {0, 2};
  initialize(m);
  m.dependencies.push_back({"res", {{"fc1", DependencyRole::row}, {"fc2", DependencyRole::column}}});
  const Model back = model_from_json(model_to_json(m));
  expect_same_parameters(m, back);
  EXPECT_EQ(back.zero_input_columns, m.zero_input_columns);
  ASSERT_EQ(back.dependencies.size(), 1u);
  EXPECT_EQ(back.dependencies[0].members[1].role, DependencyRole::column);
  EXPECT_EQ(model_to_json(back).dump(), model_to_json(m).dump());
}

TEST(Serialization, TransformerRoundTripIsExact) {
  const Model m = make_transformer({2, 4, 8, 12, 3}, 3);
  expect_same_parameters(m, model_from_json(model_to_json(m)));
}

TEST(Serialization, ValuelessModelIsInitializedFromSeed) {
  const Model m = make_mlp({4, {3}, 2}, 5);
  Json doc = model_to_json(m);
  for (auto& layer : doc["layers"]) {
    layer.erase("weight");
    layer.erase("bias_values");
  }
  expect_same_parameters(m, model_from_json(doc));
  doc["layers"][0]["weight"] = std::vector<double>(12, 0.0);
  EXPECT_THROW(model_from_json(doc), ConfigError);
}

TEST(Serialization, RejectsUnknownKeysAndBadShapes) {
  const Model m = make_mlp({4, {3}, 2}, 5);
  Json doc = model_to_json(m);
  doc["layres"] = 1;
  EXPECT_THROW(model_from_json(doc), ConfigError);
  doc = model_to_json(m);
  doc["layers"][0]["weight"] = std::vector<double>(5, 0.0);
  EXPECT_THROW(model_from_json(doc), ConfigError);
  doc = model_to_json(m);
  doc["layers"][0]["d_out"] = 7;
  doc["layers"][0].erase("weight");
  doc["layers"][0].erase("bias_values");
  EXPECT_THROW(model_from_json(doc), ConfigError);
}

TEST(Serialization, AdapterRoundTrip) {
  const Model m = make_transformer({2, 4, 8, 12, 3}, 3);
  RngStream rng(4);
  AdapterSet set;
  set.rows.push_back(build_row_adapter(m.linear("block.q"), RowSelection({1, 5}, 8)));
  set.rows[0].weight = random_tensor({2, 8}, rng);
  set.loras.push_back(build_lora_adapter(m.linear("block.fc1"), 2, 16.0, 0.1, 8));
  set.loras[0].b = random_tensor({12, 2}, rng);
  set.columns.push_back(build_column_adapter(m.linear("block.fc2"), RowSelection({0, 3}, 12)));
  set.columns[0].weight = random_tensor({8, 2}, rng);
  set.vectors.push_back(build_vector_adapter(m.norm("ln_f"), VectorField::shift, RowSelection({2}, 8)));
  set.vectors[0].delta = random_tensor({1}, rng);

  const AdapterSet back = adapters_from_json(adapters_to_json(set), m);
  EXPECT_EQ(back.rows[0].weight, set.rows[0].weight);
  EXPECT_EQ(back.rows[0].selection, set.rows[0].selection);
  EXPECT_EQ(back.loras[0].a, set.loras[0].a);
  EXPECT_EQ(back.loras[0].b, set.loras[0].b);
  EXPECT_EQ(back.loras[0].alpha, 16.0);
  EXPECT_EQ(back.loras[0].dropout, 0.1);
  EXPECT_EQ(back.columns[0].weight, set.columns[0].weight);
  EXPECT_EQ(back.vectors[0].field, VectorField::shift);
  EXPECT_EQ(back.vectors[0].delta, set.vectors[0].delta);
}

TEST(Serialization, AdapterDocumentErrors) {
  const Model m = make_mlp({4, {3}, 2}, 5);
  AdapterSet set;
  set.rows.push_back(build_row_adapter(m.linear("fc1"), RowSelection({0}, 3)));
  Json doc = adapters_to_json(set);
  doc["adapters"][0]["target"] = "missing";
  EXPECT_THROW(adapters_from_json(doc, m), ConfigError);
  doc = adapters_to_json(set);
  doc["adapters"][0]["indices"] = {2, 1};
  EXPECT_THROW(adapters_from_json(doc, m), ConfigError);
  doc = adapters_to_json(set);
  doc["format"] = "other";
  EXPECT_THROW(adapters_from_json(doc, m), ConfigError);
}

TEST(Serialization, FileHelpers) {
  const auto dir = std::filesystem::temp_directory_path() / "spruft_serialization_test";
  std::filesystem::create_directories(dir);
  const Json doc = {{"a", 1}, {"b", {1.5, 2.5}}};
  write_json_file(dir / "x.json", doc);
  EXPECT_EQ(read_json_file(dir / "x.json"), doc);
  EXPECT_THROW(read_json_file(dir / "absent.json"), IoError);
  write_text_file(dir / "bad.json", "{not json");
  EXPECT_THROW(read_json_file(dir / "bad.json"), ConfigError);
  std::filesystem::remove_all(dir);
}
