#include "spruft/layers.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

#include "spruft/errors.hpp"
#include "spruft/rng.hpp"

namespace spruft {

namespace {

template <class>
inline constexpr bool always_false = false;

// Visits every linear layer (including block sublayers) with its role.
template <class ModelT, class Fn>
void for_each_linear(ModelT& model, Fn&& fn) {
  for (auto& layer : model.layers) {
    if (auto* l = std::get_if<LinearLayer>(&layer)) {
      fn(*l, LayerRole::plain);
    } else if (auto* b = std::get_if<TransformerBlock>(&layer)) {
      fn(b->q, LayerRole::attention);
      fn(b->k, LayerRole::attention);
      fn(b->v, LayerRole::attention);
      fn(b->o, LayerRole::attention);
      fn(b->fc1, LayerRole::mlp);
      fn(b->fc2, LayerRole::mlp);
    }
  }
}

template <class ModelT, class Fn>
void for_each_norm(ModelT& model, Fn&& fn) {
  for (auto& layer : model.layers) {
    if (auto* n = std::get_if<LayerNormLayer>(&layer)) {
      fn(*n);
    } else if (auto* b = std::get_if<TransformerBlock>(&layer)) {
      fn(b->ln1);
      fn(b->ln2);
    }
  }
}

template <class ModelT>
auto* find_linear(ModelT& model, const std::string& id) {
  using Ptr = std::conditional_t<std::is_const_v<ModelT>, const LinearLayer*, LinearLayer*>;
  Ptr found = nullptr;
  for_each_linear(model, [&](auto& l, LayerRole) {
    if (l.id == id) found = &l;
  });
  return found;
}

template <class ModelT>
auto* find_norm(ModelT& model, const std::string& id) {
  using Ptr = std::conditional_t<std::is_const_v<ModelT>, const LayerNormLayer*, LayerNormLayer*>;
  Ptr found = nullptr;
  for_each_norm(model, [&](auto& n) {
    if (n.id == id) found = &n;
  });
  return found;
}

std::pair<std::string, std::string> split_parameter_name(const std::string& name) {
  const auto dot = name.rfind('.');
  if (dot == std::string::npos) throw ContractError("parameter name '" + name + "' lacks a '.<kind>' suffix");
  return {name.substr(0, dot), name.substr(dot + 1)};
}

LinearLayer make_linear(std::string id, std::size_t d_in, std::size_t d_out) {
  return LinearLayer{std::move(id), Tensor({d_out, d_in}), Tensor({d_out})};
}

LayerNormLayer make_norm(std::string id, std::size_t d) {
  return LayerNormLayer{std::move(id), Tensor({d}, 1.0), Tensor({d}), 1e-5};
}

}  // namespace

LinearLayer& Model::linear(const std::string& id) {
  if (auto* l = find_linear(*this, id)) return *l;
  throw ContractError("no linear layer '" + id + "'");
}

const LinearLayer& Model::linear(const std::string& id) const {
  if (auto* l = find_linear(*this, id)) return *l;
  throw ContractError("no linear layer '" + id + "'");
}

LayerNormLayer& Model::norm(const std::string& id) {
  if (auto* n = find_norm(*this, id)) return *n;
  throw ContractError("no layer norm '" + id + "'");
}

const LayerNormLayer& Model::norm(const std::string& id) const {
  if (auto* n = find_norm(*this, id)) return *n;
  throw ContractError("no layer norm '" + id + "'");
}

bool Model::has_linear(const std::string& id) const { return find_linear(*this, id) != nullptr; }
bool Model::has_norm(const std::string& id) const { return find_norm(*this, id) != nullptr; }

std::vector<LinearInfo> Model::linear_layers() const {
  std::vector<LinearInfo> out;
  for_each_linear(*this, [&](const LinearLayer& l, LayerRole role) { out.push_back({l.id, l.d_in(), l.d_out(), role}); });
  if (!out.empty() && std::holds_alternative<LinearLayer>(layers.back())) out.back().role = LayerRole::head;
  return out;
}

std::vector<std::string> Model::norm_layers() const {
  std::vector<std::string> out;
  for_each_norm(*this, [&](const LayerNormLayer& n) { out.push_back(n.id); });
  return out;
}

std::string Model::head_id() const {
  if (layers.empty() || !std::holds_alternative<LinearLayer>(layers.back())) {
    throw ConfigError("model must end with a linear classification head");
  }
  return std::get<LinearLayer>(layers.back()).id;
}

Tensor& Model::parameter(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const Model&>(*this).parameter(name));
}

const Tensor& Model::parameter(const std::string& name) const {
  auto [layer, kind] = split_parameter_name(name);
  if (kind == "weight") return linear(layer).weight;
  if (kind == "bias") {
    const auto& l = linear(layer);
    if (!l.bias) throw ContractError("layer '" + layer + "' has no bias");
    return *l.bias;
  }
  if (kind == "gain") return norm(layer).gain;
  if (kind == "shift") return norm(layer).shift;
  throw ContractError("unknown parameter kind in '" + name + "'");
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& layer : layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          auto add_linear = [&](const LinearLayer& lin) {
            names.push_back(lin.id + ".weight");
            if (lin.bias) names.push_back(lin.id + ".bias");
          };
          auto add_norm = [&](const LayerNormLayer& n) {
            names.push_back(n.id + ".gain");
            names.push_back(n.id + ".shift");
          };
          if constexpr (std::is_same_v<T, LinearLayer>) {
            add_linear(l);
          } else if constexpr (std::is_same_v<T, LayerNormLayer>) {
            add_norm(l);
          } else if constexpr (std::is_same_v<T, TransformerBlock>) {
            add_norm(l.ln1);
            for (const auto* lin : {&l.q, &l.k, &l.v, &l.o}) add_linear(*lin);
            add_norm(l.ln2);
            add_linear(l.fc1);
            add_linear(l.fc2);
          }
        },
        layer);
  }
  return names;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& name : parameter_names()) n += parameter(name).size();
  return n;
}

void Model::validate() const {
  if (input_dim == 0) throw ConfigError("model input_dim must be positive");
  if (num_classes == 0) throw ConfigError("model num_classes must be positive");
  std::set<std::string> ids;
  auto claim = [&](const std::string& id) {
    if (id.empty()) throw ConfigError("layer without id");
    if (!ids.insert(id).second) throw ConfigError("duplicate layer id '" + id + "'");
  };
  auto check_linear = [&](const LinearLayer& l, std::size_t in) {
    claim(l.id);
    if (l.d_in() != in) {
      throw ConfigError("layer '" + l.id + "' expects " + std::to_string(l.d_in()) + " inputs but receives " +
                        std::to_string(in));
    }
    if (l.weight.rank() != 2) throw ConfigError("layer '" + l.id + "' weight must be a matrix");
    if (l.bias && l.bias->size() != l.d_out()) throw ConfigError("layer '" + l.id + "' bias length mismatch");
    if (!l.weight.all_finite()) throw ConfigError("layer '" + l.id + "' has non-finite weights");
    return l.d_out();
  };
  auto check_norm = [&](const LayerNormLayer& n, std::size_t in) {
    claim(n.id);
    if (n.gain.size() != n.shift.size()) throw ConfigError("layer norm '" + n.id + "' gain/shift length differ");
    if (n.dim() != in) throw ConfigError("layer norm '" + n.id + "' dimension mismatch");
    if (!(n.eps > 0.0)) throw ConfigError("layer norm '" + n.id + "' eps must be positive");
  };
  std::size_t dim = input_dim;
  std::size_t tokens = 1;
  for (const auto& layer : layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>) {
            dim = check_linear(l, dim);
          } else if constexpr (std::is_same_v<T, LayerNormLayer>) {
            check_norm(l, dim);
          } else if constexpr (std::is_same_v<T, ActivationLayer>) {
            claim(l.id);
          } else if constexpr (std::is_same_v<T, TokensLayer>) {
            claim(l.id);
            if (l.seq_len == 0 || dim % l.seq_len != 0 || tokens != 1) {
              throw ConfigError("tokens layer '" + l.id + "' cannot split " + std::to_string(dim) + " features");
            }
            dim /= l.seq_len;
            tokens = l.seq_len;
          } else if constexpr (std::is_same_v<T, MeanPoolLayer>) {
            claim(l.id);
            tokens = 1;
          } else if constexpr (std::is_same_v<T, TransformerBlock>) {
            claim(l.id);
            claim(l.id + ".attention");
            claim(l.id + ".act");
            check_norm(l.ln1, dim);
            for (const auto* lin : {&l.q, &l.k, &l.v, &l.o}) {
              if (check_linear(*lin, dim) != dim) throw ConfigError("attention projection '" + lin->id + "' must be square");
            }
            check_norm(l.ln2, dim);
            const std::size_t hidden = check_linear(l.fc1, dim);
            if (check_linear(l.fc2, hidden) != dim) throw ConfigError("block '" + l.id + "' fc2 must map back to d_model");
          } else {
            static_assert(always_false<T>);
          }
        },
        layer);
  }
  if (tokens != 1) throw ConfigError("token rows must be pooled before the head");
  if (dim != num_classes) {
    throw ConfigError("model output dimension " + std::to_string(dim) + " differs from num_classes " +
                      std::to_string(num_classes));
  }
  (void)head_id();
  for (std::size_t c : zero_input_columns) {
    if (c >= input_dim) throw ConfigError("zero_input_columns entry out of range");
  }
  for (const auto& dep : dependencies) {
    std::optional<std::size_t> width;
    for (const auto& m : dep.members) {
      if (!has_linear(m.layer)) throw ConfigError("dependency '" + dep.id + "' names unknown layer '" + m.layer + "'");
      const auto& l = linear(m.layer);
      const std::size_t w = m.role == DependencyRole::row ? l.d_out() : l.d_in();
      if (width && *width != w) throw ConfigError("dependency '" + dep.id + "' members have different widths");
      width = w;
    }
    if (dep.members.empty()) throw ConfigError("dependency '" + dep.id + "' has no members");
  }
}

Model make_mlp(const MlpShape& shape, std::uint64_t seed) {
  Model model;
  model.input_dim = shape.input_dim;
  model.num_classes = shape.num_classes;
  model.seed = seed;
  std::size_t in = shape.input_dim;
  for (std::size_t i = 0; i < shape.hidden.size(); ++i) {
    model.layers.emplace_back(make_linear("fc" + std::to_string(i + 1), in, shape.hidden[i]));
    model.layers.emplace_back(ActivationLayer{"relu" + std::to_string(i + 1), ActivationKind::relu});
    in = shape.hidden[i];
  }
  model.layers.emplace_back(make_linear("head", in, shape.num_classes));
  initialize(model);
  model.validate();
  return model;
}

Model make_transformer(const TransformerShape& shape, std::uint64_t seed) {
  Model model;
  model.input_dim = shape.seq_len * shape.token_dim;
  model.num_classes = shape.num_classes;
  model.seed = seed;
  const std::size_t d = shape.d_model;
  model.layers.emplace_back(TokensLayer{"tokens", shape.seq_len});
  model.layers.emplace_back(make_linear("embed", shape.token_dim, d));
  TransformerBlock block;
  block.id = "block";
  block.ln1 = make_norm("block.ln1", d);
  block.q = make_linear("block.q", d, d);
  block.k = make_linear("block.k", d, d);
  block.v = make_linear("block.v", d, d);
  block.o = make_linear("block.o", d, d);
  block.ln2 = make_norm("block.ln2", d);
  block.fc1 = make_linear("block.fc1", d, shape.mlp_hidden);
  block.fc2 = make_linear("block.fc2", shape.mlp_hidden, d);
  model.layers.emplace_back(std::move(block));
  model.layers.emplace_back(MeanPoolLayer{"pool"});
  model.layers.emplace_back(make_norm("ln_f", d));
  model.layers.emplace_back(make_linear("head", d, shape.num_classes));
  // Residual stream coordinates: written by embed, o and fc2; read by q, k, v and fc1.
  model.dependencies.push_back({"residual",
                                {{"embed", DependencyRole::row},
                                 {"block.o", DependencyRole::row},
                                 {"block.fc2", DependencyRole::row},
                                 {"block.q", DependencyRole::column},
                                 {"block.k", DependencyRole::column},
                                 {"block.v", DependencyRole::column},
                                 {"block.fc1", DependencyRole::column}}});
  initialize(model);
  model.validate();
  return model;
}

void initialize(Model& model) {
  const std::uint64_t init_key = substream(model.seed, "init");
  bool first = true;
  for_each_linear(model, [&](LinearLayer& l, LayerRole) {
    const CounterRng rng(substream(init_key, l.id));
    const double scale = 1.0 / std::sqrt(static_cast<double>(l.d_in()));
    for (std::size_t i = 0; i < l.weight.size(); ++i) l.weight[i] = scale * rng.normal(i);
    if (l.bias) l.bias->fill(0.0);
    if (first) {
      for (std::size_t c : model.zero_input_columns) {
        if (c >= l.d_in()) throw ConfigError("zero_input_columns entry out of range");
        for (std::size_t r = 0; r < l.d_out(); ++r) l.weight(r, c) = 0.0;
      }
      first = false;
    }
  });
  for_each_norm(model, [](LayerNormLayer& n) {
    n.gain.fill(1.0);
    n.shift.fill(0.0);
  });
}

void LabeledBatch::validate(std::size_t num_classes) const {
  if (labels.empty()) throw ContractError("batch is empty");
  if (inputs.rank() != 2 || inputs.rows() != labels.size()) {
    throw ContractError("batch inputs " + shape_string(inputs.shape()) + " do not match " +
                        std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ContractError("label " + std::to_string(y) + " out of range for " + std::to_string(num_classes) +
                          " classes");
    }
  }
}

LabeledBatch LabeledBatch::subset(std::span<const std::size_t> rows) const {
  if (rows.empty()) throw ContractError("empty subset");
  const std::size_t d = inputs.cols();
  Tensor x({rows.size(), d});
  std::vector<int> y;
  y.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < d; ++c) x(i, c) = inputs(rows[i], c);
    y.push_back(labels.at(rows[i]));
  }
  return {std::move(x), std::move(y)};
}

LabeledBatch LabeledBatch::with_label(int label) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) rows.push_back(i);
  if (rows.empty()) throw ContractError("no examples with label " + std::to_string(label));
  return subset(rows);
}

NodeId BaseParameters::parameter(Tape& tape, const Tensor& value, const std::string& name) {
  const bool trainable = trainable_.contains(name);
  const NodeId id = tape.leaf(value, trainable ? LeafRole::trainable : LeafRole::frozen, name);
  if (trainable) bindings_[name] = id;
  return id;
}

NodeId BaseParameters::base_linear(Tape& tape, const LinearLayer& layer, NodeId x) {
  const NodeId w = parameter(tape, layer.weight, layer.id + ".weight");
  NodeId out = tape.matmul_nt(x, w, layer.id + ".base");
  if (layer.bias) out = tape.add_row_vector(out, parameter(tape, *layer.bias, layer.id + ".bias"), layer.id + ".out");
  return out;
}

NodeId BaseParameters::linear(Tape& tape, const LinearLayer& layer, NodeId x) { return base_linear(tape, layer, x); }

NodeId BaseParameters::layer_norm(Tape& tape, const LayerNormLayer& layer, NodeId x) {
  const NodeId g = parameter(tape, layer.gain, layer.id + ".gain");
  const NodeId s = parameter(tape, layer.shift, layer.id + ".shift");
  return tape.layer_norm(x, g, s, layer.eps, layer.id + ".out");
}

NodeId forward_model(Tape& tape, const Model& model, NodeId input, ParameterPolicy& policy) {
  if (tape.value(input).cols() != model.input_dim) {
    throw DimensionError("model expects " + std::to_string(model.input_dim) + " input features, got " +
                         shape_string(tape.value(input).shape()));
  }
  NodeId h = input;
  std::size_t tokens = 1;
  auto run_linear = [&](const LinearLayer& l, NodeId x) {
    Tape::Scope scope(tape, l.id);
    return policy.linear(tape, l, x);
  };
  auto run_norm = [&](const LayerNormLayer& n, NodeId x) {
    Tape::Scope scope(tape, n.id);
    return policy.layer_norm(tape, n, x);
  };
  for (const auto& layer : model.layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>) {
            h = run_linear(l, h);
          } else if constexpr (std::is_same_v<T, LayerNormLayer>) {
            h = run_norm(l, h);
          } else if constexpr (std::is_same_v<T, ActivationLayer>) {
            Tape::Scope scope(tape, l.id);
            h = l.kind == ActivationKind::relu ? tape.relu(h, l.id + ".out") : tape.gelu(h, l.id + ".out");
          } else if constexpr (std::is_same_v<T, TokensLayer>) {
            const Tensor& v = tape.value(h);
            h = tape.reshape(h, {v.rows() * l.seq_len, v.cols() / l.seq_len}, l.id + ".out");
            tokens = l.seq_len;
          } else if constexpr (std::is_same_v<T, MeanPoolLayer>) {
            Tape::Scope scope(tape, l.id);
            h = tape.mean_pool(h, tokens, l.id + ".out");
            tokens = 1;
          } else if constexpr (std::is_same_v<T, TransformerBlock>) {
            const NodeId a = run_norm(l.ln1, h);
            const NodeId q = run_linear(l.q, a);
            const NodeId k = run_linear(l.k, a);
            const NodeId v = run_linear(l.v, a);
            NodeId att;
            {
              Tape::Scope scope(tape, l.id + ".attention");
              att = tape.attention(q, k, v, tokens, l.id + ".attention.out");
            }
            h = tape.add(h, run_linear(l.o, att), l.id + ".residual1");
            const NodeId c = run_norm(l.ln2, h);
            NodeId f = run_linear(l.fc1, c);
            {
              Tape::Scope scope(tape, l.id + ".act");
              f = tape.gelu(f, l.id + ".act.out");
            }
            h = tape.add(h, run_linear(l.fc2, f), l.id + ".residual2");
          } else {
            static_assert(always_false<T>);
          }
        },
        layer);
  }
  return h;
}

LossResult model_loss(const Model& model, const LabeledBatch& batch, ParameterPolicy& policy) {
  batch.validate(model.num_classes);
  LossResult r;
  const NodeId x = r.tape.input(batch.inputs, "input");
  r.logits = forward_model(r.tape, model, x, policy);
  {
    Tape::Scope scope(r.tape, "loss");
    r.loss_node = r.tape.softmax_cross_entropy(r.logits, batch.labels, "loss");
  }
  r.loss = r.tape.value(r.loss_node)[0];
  return r;
}

LossResult model_loss(const Model& model, const LabeledBatch& batch) {
  BaseParameters frozen;
  return model_loss(model, batch, frozen);
}

Tensor forward_linear(const LinearLayer& layer, const Tensor& x) {
  Tensor out = matmul_nt(x, layer.weight);
  if (layer.bias) {
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += (*layer.bias)[j];
  }
  return out;
}

Tensor predict_logits(const Model& model, const Tensor& inputs, ParameterPolicy& policy) {
  Tape tape;
  const NodeId x = tape.input(inputs);
  return tape.value(forward_model(tape, model, x, policy));
}

std::vector<int> predict_labels(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

Tensor finite_diff_gradient(const std::function<double()>& loss, Tensor& param, double step) {
  if (!(step > 0.0)) throw ContractError("finite difference step must be positive");
  Tensor grad(param.shape());
  for (std::size_t j = 0; j < param.size(); ++j) {
    const double saved = param[j];
    param[j] = saved + step;
    const double up = loss();
    param[j] = saved - step;
    const double down = loss();
    param[j] = saved;
    grad[j] = (up - down) / (2.0 * step);
  }
  return grad;
}

Tensor finite_diff_gradient(const Model& model, const LabeledBatch& batch, const std::string& param_name,
                            double step) {
  Model work = model;
  Tensor& param = work.parameter(param_name);
  return finite_diff_gradient([&] { return model_loss(work, batch).loss; }, param, step);
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw ContractError("accuracy: size mismatch or empty");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

FiveNumberSummary per_class_accuracy_summary(std::span<const int> predicted, std::span<const int> labels,
                                             std::size_t num_classes) {
  if (predicted.size() != labels.size()) throw ContractError("per-class accuracy: size mismatch");
  std::vector<std::size_t> total(num_classes), hits(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= num_classes) throw ContractError("per-class accuracy: label out of range");
    ++total[y];
    hits[y] += predicted[i] == labels[i];
  }
  std::vector<double> acc(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (total[c] == 0) throw ContractError("label " + std::to_string(c) + " has no examples");
    acc[c] = static_cast<double>(hits[c]) / static_cast<double>(total[c]);
  }
  return summarize(acc);
}

FiveNumberSummary per_class_accuracy_summary(const Model& model, const LabeledBatch& batch) {
  batch.validate(model.num_classes);
  BaseParameters frozen;
  const auto predicted = predict_labels(predict_logits(model, batch.inputs, frozen));
  return per_class_accuracy_summary(predicted, batch.labels, model.num_classes);
}

}  // namespace spruft
