#pragma once

#include <filesystem>
#include <set>
#include <string>

#include "json.hpp"
#include "spruft/adapters.hpp"
#include "spruft/layers.hpp"

namespace spruft {

using Json = nlohmann::ordered_json;

/// Model document:
///   {"format": "spruft-model", "version": 1, "input_dim", "num_classes", "seed",
///    "zero_input_columns": [...], "layers": [...], "dependencies": [...]}
/// Layer objects carry "type" (linear | layer_norm | activation | tokens |
/// mean_pool | transformer_block) and "id". Linear layers hold "d_in", "d_out",
/// "bias" (bool) and, optionally, row-major "weight" and "bias_values"; layer
/// norms hold "dim", "eps" and optionally "gain"/"shift". When no layer carries
/// values the model is initialized from its seed.
Json model_to_json(const Model& model);
Model model_from_json(const Json& doc);

/// Adapter document: {"format": "spruft-adapter", "version": 1, "adapters": [...]}
/// with entries of "kind" row | lora | column | vector.
Json adapters_to_json(const AdapterSet& adapters);
AdapterSet adapters_from_json(const Json& doc, const Model& model);

/// Optional "base_parameters" section: base tensors trained directly (head, full FT).
void attach_base_parameters(Json& adapter_doc, const Model& model, const std::set<std::string>& names);
/// Overwrites the listed base tensors; a document without the section is a no-op.
void apply_base_parameters(const Json& adapter_doc, Model& model);

Json read_json_file(const std::filesystem::path& path);
/// Writes `doc` with two-space indentation and a trailing newline.
void write_json_file(const std::filesystem::path& path, const Json& doc);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Throws ConfigError naming the first key of `obj` outside `allowed`.
void reject_unknown_keys(const Json& obj, std::initializer_list<const char*> allowed, const std::string& where);

}  // namespace spruft
