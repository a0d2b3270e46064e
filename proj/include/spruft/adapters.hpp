#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "spruft/layers.hpp"
#include "spruft/tensor.hpp"

namespace spruft {

/// Strictly increasing distinct indices into [0, bound).
class RowSelection {
 public:
  RowSelection() = default;
  /// Throws ContractError on duplicates, disorder, or out-of-range entries.
  RowSelection(std::vector<std::size_t> indices, std::size_t bound);
  static RowSelection all(std::size_t n);

  const std::vector<std::size_t>& indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  std::size_t bound() const { return bound_; }
  bool operator==(const RowSelection&) const = default;

 private:
  std::vector<std::size_t> indices_;
  std::size_t bound_ = 0;
};

/// W_s = M·W_f: trainable rows scattered into the selected output neurons.
struct RowAdapter {
  std::string target;
  RowSelection selection;
  Tensor weight;  // r × d_in, zero at construction
};

/// Ŵ = W + (α/r)·B·A, dropout on the branch input while training.
struct LoRAAdapter {
  std::string target;
  Tensor a;  // r × d_in
  Tensor b;  // d_out × r, zero at construction
  double alpha = 16.0;
  std::size_t rank = 0;
  double dropout = 0.0;

  double scale() const { return alpha / static_cast<double>(rank); }
};

enum class VectorField { gain, shift };

/// Additive update on selected entries of a layer-norm gain or shift.
struct VectorAdapter {
  std::string target;
  VectorField field = VectorField::gain;
  RowSelection selection;
  Tensor delta;  // r, zero at construction
};

/// W_{f,dep}·M_dep: trainable columns over selected input coordinates.
struct ColumnAdapter {
  std::string target;
  RowSelection columns;
  Tensor weight;  // d_out × r_c, zero at construction
};

enum class GroupAggregation { sum, mean, max };

/// Shared index set for the row members and column members of one dependency.
struct DependencyGroup {
  std::string id;
  std::vector<DependencyMember> members;
  RowSelection selection;
};

RowAdapter build_row_adapter(const LinearLayer& layer, RowSelection selection);
/// A has i.i.d. N(0, 1) entries scaled by 1/√r, keyed by `key`; B = 0.
LoRAAdapter build_lora_adapter(const LinearLayer& layer, std::size_t rank, double alpha, double dropout,
                               std::uint64_t key);
VectorAdapter build_vector_adapter(const LayerNormLayer& layer, VectorField field, RowSelection selection);
ColumnAdapter build_column_adapter(const LinearLayer& layer, RowSelection columns);

Tensor adapted_forward(const LinearLayer& layer, const RowAdapter& adapter, const Tensor& x);
/// Dropout masks come from `dropout_key`; only used when `training`.
Tensor lora_forward(const LinearLayer& layer, const LoRAAdapter& adapter, const Tensor& x, bool training,
                    std::uint64_t dropout_key = 0);
/// Frozen branch + optional row branch + column branch over gathered inputs.
Tensor dependency_adapted_forward(const LinearLayer& layer, const RowAdapter* row_part, const ColumnAdapter& col_part,
                                  const Tensor& x);

LinearLayer merge(const RowAdapter& adapter, const LinearLayer& layer);
LinearLayer merge(const LoRAAdapter& adapter, const LinearLayer& layer);
LinearLayer merge(const ColumnAdapter& adapter, const LinearLayer& layer);
LayerNormLayer merge(const VectorAdapter& adapter, const LayerNormLayer& layer);

/// Inverted-dropout mask (0 or 1/(1−rate)) for a rows × cols input.
Tensor dropout_mask(std::size_t rows, std::size_t cols, double rate, std::uint64_t key);

/// Reduces member scores for one index into a group score.
double aggregate(std::span<const double> member_scores, GroupAggregation how);

struct AdapterSet {
  std::vector<RowAdapter> rows;
  std::vector<LoRAAdapter> loras;
  std::vector<VectorAdapter> vectors;
  std::vector<ColumnAdapter> columns;

  bool empty() const { return rows.empty() && loras.empty() && vectors.empty() && columns.empty(); }
  const RowAdapter* row_for(const std::string& layer) const;
  const LoRAAdapter* lora_for(const std::string& layer) const;
  const ColumnAdapter* column_for(const std::string& layer) const;
  const VectorAdapter* vector_for(const std::string& layer, VectorField field) const;
  /// Throws ContractError on unknown targets, shape mismatch, or two adapters of one kind on a target.
  void validate(const Model& model) const;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
};

struct TrainableView {
  std::size_t count = 0;
  std::vector<NamedTensor> tensors;
};

/// Adapter-owned scalars only; base weights are excluded.
TrainableView trainable_parameters(AdapterSet& adapters);
std::size_t trainable_parameter_count(const AdapterSet& adapters);
/// (parameter name, element count) for every adapter tensor, in view order.
std::vector<std::pair<std::string, std::size_t>> adapter_parameter_sizes(const AdapterSet& adapters);

/// Parameter names under which adapter leaves are bound on a tape.
std::string row_adapter_name(const std::string& layer);
std::string lora_a_name(const std::string& layer);
std::string lora_b_name(const std::string& layer);
std::string column_adapter_name(const std::string& layer);
std::string vector_adapter_name(const std::string& layer, VectorField field);

/// Copy of the model with every adapter folded into its base weights.
Model merge(const Model& model, const AdapterSet& adapters);

/// Emits base weights plus every adapter branch. Adapter leaves are always
/// trainable; base parameters are trainable only when listed.
class AdaptedPolicy : public BaseParameters {
 public:
  explicit AdaptedPolicy(const AdapterSet& adapters, std::set<std::string> trainable_base = {},
                         bool training = false, std::uint64_t dropout_key = 0);

  NodeId linear(Tape& tape, const LinearLayer& layer, NodeId x) override;
  NodeId layer_norm(Tape& tape, const LayerNormLayer& layer, NodeId x) override;

 private:
  NodeId adapter_leaf(Tape& tape, const Tensor& value, const std::string& name);

  const AdapterSet& adapters_;
  bool training_;
  std::uint64_t dropout_key_;
};

}  // namespace spruft
