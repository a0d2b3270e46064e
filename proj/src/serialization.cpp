#include "spruft/serialization.hpp"

#include <fstream>
#include <sstream>

#include "spruft/errors.hpp"

namespace spruft {

void reject_unknown_keys(const Json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

namespace {

template <class T>
T required(const Json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": key '" + key + "' has the wrong type (" + e.what() + ")");
  }
}

Tensor tensor_from(const Json& values, Shape shape, const std::string& where) {
  std::vector<double> v;
  try {
    v = values.get<std::vector<double>>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": expected an array of numbers");
  }
  if (v.size() != element_count(shape)) {
    throw ConfigError(where + ": expected " + std::to_string(element_count(shape)) + " values, got " +
                      std::to_string(v.size()));
  }
  return Tensor(std::move(shape), std::move(v));
}

Json linear_to_json(const LinearLayer& l) {
  Json j;
  j["type"] = "linear";
  j["id"] = l.id;
  j["d_in"] = l.d_in();
  j["d_out"] = l.d_out();
  j["bias"] = l.bias.has_value();
  j["weight"] = l.weight.values();
  if (l.bias) j["bias_values"] = l.bias->values();
  return j;
}

Json norm_to_json(const LayerNormLayer& n) {
  Json j;
  j["type"] = "layer_norm";
  j["id"] = n.id;
  j["dim"] = n.dim();
  j["eps"] = n.eps;
  j["gain"] = n.gain.values();
  j["shift"] = n.shift.values();
  return j;
}

// Counts how many value arrays were present so mixed documents can be rejected.
struct ValueTally {
  std::size_t present = 0;
  std::size_t absent = 0;
};

LinearLayer linear_from(const Json& j, ValueTally& tally) {
  const std::string where = "linear layer";
  reject_unknown_keys(j, {"type", "id", "d_in", "d_out", "bias", "weight", "bias_values"}, where);
  const auto id = required<std::string>(j, "id", where);
  const auto d_in = required<std::size_t>(j, "d_in", where + " '" + id + "'");
  const auto d_out = required<std::size_t>(j, "d_out", where + " '" + id + "'");
  if (d_in == 0 || d_out == 0) throw ConfigError("linear layer '" + id + "' needs positive dimensions");
  const bool bias = j.value("bias", true);
  LinearLayer l{id, Tensor({d_out, d_in}), bias ? std::optional<Tensor>(Tensor({d_out})) : std::nullopt};
  if (j.contains("weight")) {
    ++tally.present;
    l.weight = tensor_from(j["weight"], {d_out, d_in}, "layer '" + id + "' weight");
    if (bias && j.contains("bias_values")) l.bias = tensor_from(j["bias_values"], {d_out}, "layer '" + id + "' bias");
  } else {
    ++tally.absent;
  }
  return l;
}

LayerNormLayer norm_from(const Json& j, ValueTally& tally) {
  const std::string where = "layer_norm";
  reject_unknown_keys(j, {"type", "id", "dim", "eps", "gain", "shift"}, where);
  const auto id = required<std::string>(j, "id", where);
  const auto dim = required<std::size_t>(j, "dim", where + " '" + id + "'");
  if (dim == 0) throw ConfigError("layer norm '" + id + "' needs a positive dim");
  LayerNormLayer n{id, Tensor({dim}, 1.0), Tensor({dim}), j.value("eps", 1e-5)};
  if (j.contains("gain") || j.contains("shift")) {
    ++tally.present;
    if (j.contains("gain")) n.gain = tensor_from(j["gain"], {dim}, "'" + id + "' gain");
    if (j.contains("shift")) n.shift = tensor_from(j["shift"], {dim}, "'" + id + "' shift");
  } else {
    ++tally.absent;
  }
  return n;
}

const char* role_name(DependencyRole r) { return r == DependencyRole::row ? "row" : "column"; }

}  // namespace

Json model_to_json(const Model& model) {
  Json doc;
  doc["format"] = "spruft-model";
  doc["version"] = 1;
  doc["input_dim"] = model.input_dim;
  doc["num_classes"] = model.num_classes;
  doc["seed"] = model.seed;
  doc["zero_input_columns"] = model.zero_input_columns;
  Json layers = Json::array();
  for (const auto& layer : model.layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>) {
            layers.push_back(linear_to_json(l));
          } else if constexpr (std::is_same_v<T, LayerNormLayer>) {
            layers.push_back(norm_to_json(l));
          } else if constexpr (std::is_same_v<T, ActivationLayer>) {
            layers.push_back({{"type", "activation"}, {"id", l.id}, {"kind", l.kind == ActivationKind::relu ? "relu" : "gelu"}});
          } else if constexpr (std::is_same_v<T, TokensLayer>) {
            layers.push_back({{"type", "tokens"}, {"id", l.id}, {"seq_len", l.seq_len}});
          } else if constexpr (std::is_same_v<T, MeanPoolLayer>) {
            layers.push_back({{"type", "mean_pool"}, {"id", l.id}});
          } else {
            Json b;
            b["type"] = "transformer_block";
            b["id"] = l.id;
            b["ln1"] = norm_to_json(l.ln1);
            b["q"] = linear_to_json(l.q);
            b["k"] = linear_to_json(l.k);
            b["v"] = linear_to_json(l.v);
            b["o"] = linear_to_json(l.o);
            b["ln2"] = norm_to_json(l.ln2);
            b["fc1"] = linear_to_json(l.fc1);
            b["fc2"] = linear_to_json(l.fc2);
            layers.push_back(std::move(b));
          }
        },
        layer);
  }
  doc["layers"] = std::move(layers);
  Json deps = Json::array();
  for (const auto& d : model.dependencies) {
    Json members = Json::array();
    for (const auto& m : d.members) members.push_back({{"layer", m.layer}, {"role", role_name(m.role)}});
    deps.push_back({{"id", d.id}, {"members", std::move(members)}});
  }
  doc["dependencies"] = std::move(deps);
  return doc;
}

Model model_from_json(const Json& doc) {
  reject_unknown_keys(doc, {"format", "version", "input_dim", "num_classes", "seed", "zero_input_columns", "layers",
                            "dependencies"},
                      "model");
  if (doc.value("format", std::string("spruft-model")) != "spruft-model") throw ConfigError("model: unexpected format");
  if (doc.value("version", 1) != 1) throw ConfigError("model: unsupported version");
  Model m;
  m.input_dim = required<std::size_t>(doc, "input_dim", "model");
  m.num_classes = required<std::size_t>(doc, "num_classes", "model");
  m.seed = doc.value("seed", std::uint64_t{0});
  m.zero_input_columns = doc.value("zero_input_columns", std::vector<std::size_t>{});
  ValueTally tally;
  for (const auto& j : required<Json>(doc, "layers", "model")) {
    const auto type = required<std::string>(j, "type", "layer");
    if (type == "linear") {
      m.layers.emplace_back(linear_from(j, tally));
    } else if (type == "layer_norm") {
      m.layers.emplace_back(norm_from(j, tally));
    } else if (type == "activation") {
      reject_unknown_keys(j, {"type", "id", "kind"}, "activation");
      const auto kind = j.value("kind", std::string("relu"));
      if (kind != "relu" && kind != "gelu") throw ConfigError("activation kind must be relu or gelu");
      m.layers.emplace_back(ActivationLayer{required<std::string>(j, "id", "activation"),
                                            kind == "relu" ? ActivationKind::relu : ActivationKind::gelu});
    } else if (type == "tokens") {
      reject_unknown_keys(j, {"type", "id", "seq_len"}, "tokens");
      m.layers.emplace_back(TokensLayer{required<std::string>(j, "id", "tokens"), required<std::size_t>(j, "seq_len", "tokens")});
    } else if (type == "mean_pool") {
      reject_unknown_keys(j, {"type", "id"}, "mean_pool");
      m.layers.emplace_back(MeanPoolLayer{required<std::string>(j, "id", "mean_pool")});
    } else if (type == "transformer_block") {
      reject_unknown_keys(j, {"type", "id", "ln1", "q", "k", "v", "o", "ln2", "fc1", "fc2"}, "transformer_block");
      TransformerBlock b;
      b.id = required<std::string>(j, "id", "transformer_block");
      b.ln1 = norm_from(required<Json>(j, "ln1", b.id), tally);
      b.q = linear_from(required<Json>(j, "q", b.id), tally);
      b.k = linear_from(required<Json>(j, "k", b.id), tally);
      b.v = linear_from(required<Json>(j, "v", b.id), tally);
      b.o = linear_from(required<Json>(j, "o", b.id), tally);
      b.ln2 = norm_from(required<Json>(j, "ln2", b.id), tally);
      b.fc1 = linear_from(required<Json>(j, "fc1", b.id), tally);
      b.fc2 = linear_from(required<Json>(j, "fc2", b.id), tally);
      m.layers.emplace_back(std::move(b));
    } else {
      throw ConfigError("unknown layer type '" + type + "'");
    }
  }
  for (const auto& d : doc.value("dependencies", Json::array())) {
    reject_unknown_keys(d, {"id", "members"}, "dependency");
    DependencySpec spec{required<std::string>(d, "id", "dependency"), {}};
    for (const auto& mj : required<Json>(d, "members", "dependency")) {
      reject_unknown_keys(mj, {"layer", "role"}, "dependency member");
      const auto role = required<std::string>(mj, "role", "dependency member");
      if (role != "row" && role != "column") throw ConfigError("dependency role must be row or column");
      spec.members.push_back({required<std::string>(mj, "layer", "dependency member"),
                              role == "row" ? DependencyRole::row : DependencyRole::column});
    }
    m.dependencies.push_back(std::move(spec));
  }
  if (tally.present > 0 && tally.absent > 0) {
    throw ConfigError("model: either every parameterized layer carries values or none does");
  }
  if (tally.present == 0) initialize(m);
  m.validate();
  return m;
}

Json adapters_to_json(const AdapterSet& adapters) {
  Json list = Json::array();
  for (const auto& a : adapters.rows) {
    list.push_back({{"kind", "row"},
                    {"target", a.target},
                    {"indices", a.selection.indices()},
                    {"shape", a.weight.shape()},
                    {"values", a.weight.values()}});
  }
  for (const auto& a : adapters.loras) {
    list.push_back({{"kind", "lora"},
                    {"target", a.target},
                    {"rank", a.rank},
                    {"alpha", a.alpha},
                    {"dropout", a.dropout},
                    {"A", a.a.values()},
                    {"B", a.b.values()}});
  }
  for (const auto& a : adapters.columns) {
    list.push_back({{"kind", "column"},
                    {"target", a.target},
                    {"indices", a.columns.indices()},
                    {"shape", a.weight.shape()},
                    {"values", a.weight.values()}});
  }
  for (const auto& a : adapters.vectors) {
    list.push_back({{"kind", "vector"},
                    {"target", a.target},
                    {"field", a.field == VectorField::gain ? "gain" : "shift"},
                    {"indices", a.selection.indices()},
                    {"values", a.delta.values()}});
  }
  Json doc;
  doc["format"] = "spruft-adapter";
  doc["version"] = 1;
  doc["adapters"] = std::move(list);
  return doc;
}

AdapterSet adapters_from_json(const Json& doc, const Model& model) {
  reject_unknown_keys(doc, {"format", "version", "adapters", "base_parameters"}, "adapter document");
  if (doc.value("format", std::string()) != "spruft-adapter") throw ConfigError("adapter document: unexpected format");
  if (doc.value("version", 0) != 1) throw ConfigError("adapter document: unsupported version");
  AdapterSet set;
  try {
    for (const auto& j : required<Json>(doc, "adapters", "adapter document")) {
      const auto kind = required<std::string>(j, "kind", "adapter");
      const auto target = required<std::string>(j, "target", "adapter");
      if (kind == "row") {
        reject_unknown_keys(j, {"kind", "target", "indices", "shape", "values"}, "row adapter");
        const auto& l = model.linear(target);
        auto a = build_row_adapter(l, RowSelection(required<std::vector<std::size_t>>(j, "indices", target), l.d_out()));
        a.weight = tensor_from(required<Json>(j, "values", target), a.weight.shape(), target + " row adapter");
        set.rows.push_back(std::move(a));
      } else if (kind == "lora") {
        reject_unknown_keys(j, {"kind", "target", "rank", "alpha", "dropout", "A", "B"}, "lora adapter");
        const auto& l = model.linear(target);
        LoRAAdapter a{target,
                      Tensor(),
                      Tensor(),
                      required<double>(j, "alpha", target),
                      required<std::size_t>(j, "rank", target),
                      j.value("dropout", 0.0)};
        if (a.rank == 0) throw ConfigError(target + ": LoRA rank must be positive");
        a.a = tensor_from(required<Json>(j, "A", target), {a.rank, l.d_in()}, target + " lora A");
        a.b = tensor_from(required<Json>(j, "B", target), {l.d_out(), a.rank}, target + " lora B");
        set.loras.push_back(std::move(a));
      } else if (kind == "column") {
        reject_unknown_keys(j, {"kind", "target", "indices", "shape", "values"}, "column adapter");
        const auto& l = model.linear(target);
        auto a = build_column_adapter(l, RowSelection(required<std::vector<std::size_t>>(j, "indices", target), l.d_in()));
        a.weight = tensor_from(required<Json>(j, "values", target), a.weight.shape(), target + " column adapter");
        set.columns.push_back(std::move(a));
      } else if (kind == "vector") {
        reject_unknown_keys(j, {"kind", "target", "field", "indices", "values"}, "vector adapter");
        const auto& n = model.norm(target);
        const auto field = required<std::string>(j, "field", target);
        if (field != "gain" && field != "shift") throw ConfigError(target + ": vector field must be gain or shift");
        auto a = build_vector_adapter(n, field == "gain" ? VectorField::gain : VectorField::shift,
                                      RowSelection(required<std::vector<std::size_t>>(j, "indices", target), n.dim()));
        a.delta = tensor_from(required<Json>(j, "values", target), a.delta.shape(), target + " vector adapter");
        set.vectors.push_back(std::move(a));
      } else {
        throw ConfigError("unknown adapter kind '" + kind + "'");
      }
    }
    set.validate(model);
  } catch (const ContractError& e) {
    throw ConfigError(std::string("adapter document: ") + e.what());
  }
  return set;
}

void attach_base_parameters(Json& adapter_doc, const Model& model, const std::set<std::string>& names) {
  if (names.empty()) return;
  Json list = Json::array();
  for (const auto& name : names) {
    const Tensor& t = model.parameter(name);
    list.push_back({{"name", name}, {"shape", t.shape()}, {"values", t.values()}});
  }
  adapter_doc["base_parameters"] = std::move(list);
}

void apply_base_parameters(const Json& adapter_doc, Model& model) {
  if (!adapter_doc.contains("base_parameters")) return;
  const Json& list = adapter_doc.at("base_parameters");
  if (!list.is_array()) throw ConfigError("adapter document: base_parameters must be an array");
  for (const auto& j : list) {
    reject_unknown_keys(j, {"name", "shape", "values"}, "base parameter");
    const auto name = j.at("name").get<std::string>();
    Tensor& dst = model.parameter(name);
    const auto values = j.at("values").get<std::vector<double>>();
    if (j.at("shape").get<Shape>() != dst.shape() || values.size() != dst.size()) {
      throw ConfigError("base parameter '" + name + "': shape does not match the model");
    }
    std::copy(values.begin(), values.end(), dst.data().begin());
  }
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_json_file(const std::filesystem::path& path, const Json& doc) { write_text_file(path, doc.dump(2) + "\n"); }

}  // namespace spruft
