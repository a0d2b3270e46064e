#include "spruft/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "spruft/errors.hpp"
#include "spruft/rng.hpp"

namespace spruft {

RowSelection::RowSelection(std::vector<std::size_t> indices, std::size_t bound)
    : indices_(std::move(indices)), bound_(bound) {
  if (indices_.empty()) throw ContractError("row selection is empty");
  for (std::size_t i = 0; i < indices_.size(); ++i) {
    if (indices_[i] >= bound) {
      throw ContractError("row index " + std::to_string(indices_[i]) + " out of range [0, " + std::to_string(bound) +
                          ")");
    }
    if (i > 0 && indices_[i] == indices_[i - 1]) {
      throw ContractError("duplicate row index " + std::to_string(indices_[i]));
    }
    if (i > 0 && indices_[i] < indices_[i - 1]) throw ContractError("row indices must be strictly increasing");
  }
}

RowSelection RowSelection::all(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return RowSelection(std::move(idx), n);
}

namespace {

void require_bound(const RowSelection& s, std::size_t bound, const std::string& what) {
  if (s.bound() != bound) {
    throw ContractError(what + ": selection built for bound " + std::to_string(s.bound()) + " but target has " +
                        std::to_string(bound));
  }
}

void require_input(const LinearLayer& layer, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != layer.d_in()) {
    throw DimensionError("layer '" + layer.id + "' expects inputs of width " + std::to_string(layer.d_in()) +
                         ", got " + shape_string(x.shape()));
  }
}

Tensor scatter_rows_output(const Tensor& u, const RowSelection& s, std::size_t width) {
  Tensor out({u.rows(), width});
  const auto& idx = s.indices();
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, idx[j]) = u(i, j);
  return out;
}

Tensor gather_input_columns(const Tensor& x, const RowSelection& s) {
  const auto& idx = s.indices();
  Tensor out({x.rows(), idx.size()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = x(i, idx[j]);
  return out;
}

const char* field_name(VectorField f) { return f == VectorField::gain ? "gain" : "shift"; }

}  // namespace

RowAdapter build_row_adapter(const LinearLayer& layer, RowSelection selection) {
  require_bound(selection, layer.d_out(), "row adapter for '" + layer.id + "'");
  const std::size_t r = selection.size();
  return RowAdapter{layer.id, std::move(selection), Tensor({r, layer.d_in()})};
}

LoRAAdapter build_lora_adapter(const LinearLayer& layer, std::size_t rank, double alpha, double dropout,
                               std::uint64_t key) {
  if (rank == 0) throw ContractError("LoRA rank must be positive");
  if (!(alpha > 0.0)) throw ContractError("LoRA alpha must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("LoRA dropout must lie in [0, 1)");
  LoRAAdapter adapter{layer.id, Tensor({rank, layer.d_in()}), Tensor({layer.d_out(), rank}), alpha, rank, dropout};
  const CounterRng rng(substream(key, layer.id));
  const double sd = 1.0 / std::sqrt(static_cast<double>(rank));
  for (std::size_t i = 0; i < adapter.a.size(); ++i) adapter.a[i] = sd * rng.normal(i);
  return adapter;
}

VectorAdapter build_vector_adapter(const LayerNormLayer& layer, VectorField field, RowSelection selection) {
  require_bound(selection, layer.dim(), "vector adapter for '" + layer.id + "'");
  const std::size_t r = selection.size();
  return VectorAdapter{layer.id, field, std::move(selection), Tensor({r})};
}

ColumnAdapter build_column_adapter(const LinearLayer& layer, RowSelection columns) {
  require_bound(columns, layer.d_in(), "column adapter for '" + layer.id + "'");
  const std::size_t r = columns.size();
  return ColumnAdapter{layer.id, std::move(columns), Tensor({layer.d_out(), r})};
}

Tensor adapted_forward(const LinearLayer& layer, const RowAdapter& adapter, const Tensor& x) {
  require_input(layer, x);
  require_bound(adapter.selection, layer.d_out(), "adapted_forward");
  Tensor out = forward_linear(layer, x);
  out += scatter_rows_output(matmul_nt(x, adapter.weight), adapter.selection, layer.d_out());
  return out;
}

Tensor dropout_mask(std::size_t rows, std::size_t cols, double rate, std::uint64_t key) {
  Tensor mask({rows, cols}, 1.0);
  if (rate == 0.0) return mask;
  const CounterRng rng(key);
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform(i) < rate ? 0.0 : keep;
  return mask;
}

Tensor lora_forward(const LinearLayer& layer, const LoRAAdapter& adapter, const Tensor& x, bool training,
                    std::uint64_t dropout_key) {
  require_input(layer, x);
  Tensor branch_in = x;
  if (training && adapter.dropout > 0.0) {
    const Tensor mask = dropout_mask(x.rows(), x.cols(), adapter.dropout, substream(dropout_key, layer.id));
    for (std::size_t i = 0; i < branch_in.size(); ++i) branch_in[i] *= mask[i];
  }
  Tensor out = forward_linear(layer, x);
  out += adapter.scale() * matmul_nt(matmul_nt(branch_in, adapter.a), adapter.b);
  return out;
}

Tensor dependency_adapted_forward(const LinearLayer& layer, const RowAdapter* row_part, const ColumnAdapter& col_part,
                                  const Tensor& x) {
  require_input(layer, x);
  require_bound(col_part.columns, layer.d_in(), "dependency_adapted_forward");
  Tensor out = row_part ? adapted_forward(layer, *row_part, x) : forward_linear(layer, x);
  out += matmul_nt(gather_input_columns(x, col_part.columns), col_part.weight);
  return out;
}

LinearLayer merge(const RowAdapter& adapter, const LinearLayer& layer) {
  require_bound(adapter.selection, layer.d_out(), "merge");
  if (adapter.weight.cols() != layer.d_in()) throw DimensionError("row adapter width differs from layer d_in");
  LinearLayer out = layer;
  const auto& idx = adapter.selection.indices();
  for (std::size_t j = 0; j < idx.size(); ++j)
    for (std::size_t c = 0; c < layer.d_in(); ++c) out.weight(idx[j], c) += adapter.weight(j, c);
  return out;
}

LinearLayer merge(const LoRAAdapter& adapter, const LinearLayer& layer) {
  LinearLayer out = layer;
  out.weight += adapter.scale() * matmul(adapter.b, adapter.a);
  return out;
}

LinearLayer merge(const ColumnAdapter& adapter, const LinearLayer& layer) {
  require_bound(adapter.columns, layer.d_in(), "merge");
  LinearLayer out = layer;
  const auto& idx = adapter.columns.indices();
  for (std::size_t r = 0; r < layer.d_out(); ++r)
    for (std::size_t j = 0; j < idx.size(); ++j) out.weight(r, idx[j]) += adapter.weight(r, j);
  return out;
}

LayerNormLayer merge(const VectorAdapter& adapter, const LayerNormLayer& layer) {
  require_bound(adapter.selection, layer.dim(), "merge");
  LayerNormLayer out = layer;
  Tensor& target = adapter.field == VectorField::gain ? out.gain : out.shift;
  const auto& idx = adapter.selection.indices();
  for (std::size_t j = 0; j < idx.size(); ++j) target[idx[j]] += adapter.delta[j];
  return out;
}

double aggregate(std::span<const double> member_scores, GroupAggregation how) {
  if (member_scores.empty()) throw ContractError("aggregate over no members");
  double acc = how == GroupAggregation::max ? member_scores[0] : 0.0;
  for (double v : member_scores) acc = how == GroupAggregation::max ? std::max(acc, v) : acc + v;
  if (how == GroupAggregation::mean) acc /= static_cast<double>(member_scores.size());
  return acc;
}

namespace {

template <class A>
const A* find_target(const std::vector<A>& list, const std::string& layer) {
  for (const auto& a : list)
    if (a.target == layer) return &a;
  return nullptr;
}

}  // namespace

const RowAdapter* AdapterSet::row_for(const std::string& layer) const { return find_target(rows, layer); }
const LoRAAdapter* AdapterSet::lora_for(const std::string& layer) const { return find_target(loras, layer); }
const ColumnAdapter* AdapterSet::column_for(const std::string& layer) const { return find_target(columns, layer); }

const VectorAdapter* AdapterSet::vector_for(const std::string& layer, VectorField field) const {
  for (const auto& v : vectors)
    if (v.target == layer && v.field == field) return &v;
  return nullptr;
}

void AdapterSet::validate(const Model& model) const {
  std::set<std::string> seen;
  auto claim = [&](const std::string& key) {
    if (!seen.insert(key).second) throw ContractError("more than one adapter of a kind on '" + key + "'");
  };
  for (const auto& a : rows) {
    claim("row:" + a.target);
    const auto& l = model.linear(a.target);
    require_bound(a.selection, l.d_out(), "row adapter '" + a.target + "'");
    if (a.weight.shape() != Shape{a.selection.size(), l.d_in()}) {
      throw ContractError("row adapter '" + a.target + "' has shape " + shape_string(a.weight.shape()));
    }
  }
  for (const auto& a : loras) {
    claim("lora:" + a.target);
    const auto& l = model.linear(a.target);
    if (a.a.shape() != Shape{a.rank, l.d_in()} || a.b.shape() != Shape{l.d_out(), a.rank}) {
      throw ContractError("LoRA adapter '" + a.target + "' factor shapes do not match the layer");
    }
  }
  for (const auto& a : columns) {
    claim("column:" + a.target);
    const auto& l = model.linear(a.target);
    require_bound(a.columns, l.d_in(), "column adapter '" + a.target + "'");
    if (a.weight.shape() != Shape{l.d_out(), a.columns.size()}) {
      throw ContractError("column adapter '" + a.target + "' has shape " + shape_string(a.weight.shape()));
    }
  }
  for (const auto& a : vectors) {
    claim(std::string(field_name(a.field)) + ":" + a.target);
    const auto& n = model.norm(a.target);
    require_bound(a.selection, n.dim(), "vector adapter '" + a.target + "'");
    if (a.delta.size() != a.selection.size()) throw ContractError("vector adapter '" + a.target + "' length mismatch");
  }
}

std::string row_adapter_name(const std::string& layer) { return layer + ".row_adapter"; }
std::string lora_a_name(const std::string& layer) { return layer + ".lora_A"; }
std::string lora_b_name(const std::string& layer) { return layer + ".lora_B"; }
std::string column_adapter_name(const std::string& layer) { return layer + ".column_adapter"; }
std::string vector_adapter_name(const std::string& layer, VectorField field) {
  return layer + "." + field_name(field) + "_adapter";
}

TrainableView trainable_parameters(AdapterSet& adapters) {
  TrainableView view;
  auto add = [&](std::string name, Tensor& t) {
    view.count += t.size();
    view.tensors.push_back({std::move(name), &t});
  };
  for (auto& a : adapters.rows) add(row_adapter_name(a.target), a.weight);
  for (auto& a : adapters.loras) {
    add(lora_a_name(a.target), a.a);
    add(lora_b_name(a.target), a.b);
  }
  for (auto& a : adapters.columns) add(column_adapter_name(a.target), a.weight);
  for (auto& a : adapters.vectors) add(vector_adapter_name(a.target, a.field), a.delta);
  return view;
}

std::vector<std::pair<std::string, std::size_t>> adapter_parameter_sizes(const AdapterSet& adapters) {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const auto& a : adapters.rows) out.emplace_back(row_adapter_name(a.target), a.weight.size());
  for (const auto& a : adapters.loras) {
    out.emplace_back(lora_a_name(a.target), a.a.size());
    out.emplace_back(lora_b_name(a.target), a.b.size());
  }
  for (const auto& a : adapters.columns) out.emplace_back(column_adapter_name(a.target), a.weight.size());
  for (const auto& a : adapters.vectors) out.emplace_back(vector_adapter_name(a.target, a.field), a.delta.size());
  return out;
}

std::size_t trainable_parameter_count(const AdapterSet& adapters) {
  std::size_t n = 0;
  for (const auto& [_, size] : adapter_parameter_sizes(adapters)) n += size;
  return n;
}

Model merge(const Model& model, const AdapterSet& adapters) {
  adapters.validate(model);
  Model out = model;
  for (const auto& a : adapters.rows) out.linear(a.target) = merge(a, out.linear(a.target));
  for (const auto& a : adapters.loras) out.linear(a.target) = merge(a, out.linear(a.target));
  for (const auto& a : adapters.columns) out.linear(a.target) = merge(a, out.linear(a.target));
  for (const auto& a : adapters.vectors) out.norm(a.target) = merge(a, out.norm(a.target));
  return out;
}

AdaptedPolicy::AdaptedPolicy(const AdapterSet& adapters, std::set<std::string> trainable_base, bool training,
                             std::uint64_t dropout_key)
    : BaseParameters(std::move(trainable_base)), adapters_(adapters), training_(training), dropout_key_(dropout_key) {}

NodeId AdaptedPolicy::adapter_leaf(Tape& tape, const Tensor& value, const std::string& name) {
  const NodeId id = tape.leaf(value, LeafRole::trainable, name);
  bindings_[name] = id;
  return id;
}

NodeId AdaptedPolicy::linear(Tape& tape, const LinearLayer& layer, NodeId x) {
  NodeId out = base_linear(tape, layer, x);
  if (const auto* row = adapters_.row_for(layer.id)) {
    const NodeId wf = adapter_leaf(tape, row->weight, row_adapter_name(layer.id));
    const NodeId u = tape.matmul_nt(x, wf, layer.id + ".row_branch");
    out = tape.add(out, tape.scatter_columns(u, row->selection.indices(), layer.d_out(), layer.id + ".row_scatter"),
                   layer.id + ".row_sum");
  }
  if (const auto* col = adapters_.column_for(layer.id)) {
    const NodeId w = adapter_leaf(tape, col->weight, column_adapter_name(layer.id));
    const NodeId g = tape.gather_columns(x, col->columns.indices(), layer.id + ".column_input");
    out = tape.add(out, tape.matmul_nt(g, w, layer.id + ".column_branch"), layer.id + ".column_sum");
  }
  if (const auto* lora = adapters_.lora_for(layer.id)) {
    const NodeId a = adapter_leaf(tape, lora->a, lora_a_name(layer.id));
    const NodeId b = adapter_leaf(tape, lora->b, lora_b_name(layer.id));
    NodeId ax;
    if (training_ && lora->dropout > 0.0) {
      const Tensor& xv = tape.value(x);
      ax = tape.dropout_matmul_nt(x, dropout_mask(xv.rows(), xv.cols(), lora->dropout, substream(dropout_key_, layer.id)),
                                  a, layer.id + ".lora_Ax");
    } else {
      ax = tape.matmul_nt(x, a, layer.id + ".lora_Ax");
    }
    const NodeId bax = tape.scale(tape.matmul_nt(ax, b, layer.id + ".lora_BAx"), lora->scale(), layer.id + ".lora_out");
    out = tape.add(out, bax, layer.id + ".lora_sum");
  }
  return out;
}

NodeId AdaptedPolicy::layer_norm(Tape& tape, const LayerNormLayer& layer, NodeId x) {
  auto effective = [&](VectorField field, const Tensor& base, const std::string& base_name) {
    NodeId p = parameter(tape, base, base_name);
    if (const auto* v = adapters_.vector_for(layer.id, field)) {
      const NodeId d = adapter_leaf(tape, v->delta, vector_adapter_name(layer.id, field));
      p = tape.add(p, tape.scatter_vector(d, v->selection.indices(), layer.dim()),
                   layer.id + "." + field_name(field) + "_effective");
    }
    return p;
  };
  const NodeId g = effective(VectorField::gain, layer.gain, layer.id + ".gain");
  const NodeId s = effective(VectorField::shift, layer.shift, layer.id + ".shift");
  return tape.layer_norm(x, g, s, layer.eps, layer.id + ".out");
}

}  // namespace spruft
