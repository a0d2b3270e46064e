#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "spruft/autodiff.hpp"
#include "spruft/stats.hpp"
#include "spruft/tensor.hpp"

namespace spruft {

/// h = x·Wᵀ + b with W of shape d_out × d_in.
struct LinearLayer {
  std::string id;
  Tensor weight;
  std::optional<Tensor> bias;

  std::size_t d_in() const { return weight.cols(); }
  std::size_t d_out() const { return weight.rows(); }
};

struct LayerNormLayer {
  std::string id;
  Tensor gain;
  Tensor shift;
  double eps = 1e-5;

  std::size_t dim() const { return gain.size(); }
};

enum class ActivationKind { relu, gelu };

struct ActivationLayer {
  std::string id;
  ActivationKind kind = ActivationKind::relu;
};

/// Splits each example row of seq_len·d features into seq_len token rows.
struct TokensLayer {
  std::string id;
  std::size_t seq_len = 1;
};

/// Averages token rows back into one row per example.
struct MeanPoolLayer {
  std::string id;
};

/// Pre-norm encoder block: x + O·attn(LN1 x), then + fc2·gelu(fc1·LN2 x).
struct TransformerBlock {
  std::string id;
  LayerNormLayer ln1;
  LinearLayer q, k, v, o;
  LayerNormLayer ln2;
  LinearLayer fc1, fc2;
};

using Layer = std::variant<LinearLayer, LayerNormLayer, ActivationLayer, TokensLayer, TransformerBlock, MeanPoolLayer>;

enum class LayerRole { plain, attention, mlp, head };

struct LinearInfo {
  std::string id;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  LayerRole role = LayerRole::plain;
};

enum class DependencyRole { row, column };

struct DependencyMember {
  std::string layer;
  DependencyRole role = DependencyRole::row;
};

/// Output rows of the row members and input columns of the column members
/// that must be adapted together.
struct DependencySpec {
  std::string id;
  std::vector<DependencyMember> members;
};

struct Model {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<Layer> layers;
  std::vector<DependencySpec> dependencies;
  /// First-layer input columns zeroed at initialization (a backbone that
  /// never saw those input directions).
  std::vector<std::size_t> zero_input_columns;

  LinearLayer& linear(const std::string& id);
  const LinearLayer& linear(const std::string& id) const;
  LayerNormLayer& norm(const std::string& id);
  const LayerNormLayer& norm(const std::string& id) const;
  bool has_linear(const std::string& id) const;
  bool has_norm(const std::string& id) const;

  /// Linear layers in forward order; the last one is the classification head.
  std::vector<LinearInfo> linear_layers() const;
  std::vector<std::string> norm_layers() const;
  std::string head_id() const;

  /// Parameter tensors by name: "<layer>.weight", "<layer>.bias", "<norm>.gain", "<norm>.shift".
  Tensor& parameter(const std::string& name);
  const Tensor& parameter(const std::string& name) const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  /// Throws ConfigError unless layer dimensions compose and ids are unique.
  void validate() const;
};

struct MlpShape {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t num_classes = 0;
};

struct TransformerShape {
  std::size_t seq_len = 4;
  std::size_t token_dim = 8;
  std::size_t d_model = 32;
  std::size_t mlp_hidden = 64;
  std::size_t num_classes = 3;
};

/// ReLU MLP with layer ids fc1..fcN and head "head".
Model make_mlp(const MlpShape& shape, std::uint64_t seed);
/// tokens → embed → one encoder block → mean pool → layer norm → head.
Model make_transformer(const TransformerShape& shape, std::uint64_t seed);
/// Fills weights from the model seed: W ~ N(0, 1/d_in), zero bias, unit gain.
void initialize(Model& model);

struct LabeledBatch {
  Tensor inputs;  // b × d_in
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  /// Throws ContractError on shape or label problems.
  void validate(std::size_t num_classes) const;
  LabeledBatch subset(std::span<const std::size_t> rows) const;
  /// Examples whose label is `label`.
  LabeledBatch with_label(int label) const;
};

/// Decides how each parameterized layer is emitted onto a tape.
class ParameterPolicy {
 public:
  virtual ~ParameterPolicy() = default;
  virtual NodeId linear(Tape& tape, const LinearLayer& layer, NodeId x) = 0;
  virtual NodeId layer_norm(Tape& tape, const LayerNormLayer& layer, NodeId x) = 0;
};

/// Plain base weights; the named parameters become trainable leaves.
class BaseParameters : public ParameterPolicy {
 public:
  explicit BaseParameters(std::set<std::string> trainable = {}) : trainable_(std::move(trainable)) {}

  NodeId linear(Tape& tape, const LinearLayer& layer, NodeId x) override;
  NodeId layer_norm(Tape& tape, const LayerNormLayer& layer, NodeId x) override;

  /// Trainable parameter name → tape leaf, filled during forward.
  const std::map<std::string, NodeId>& bindings() const { return bindings_; }

 protected:
  NodeId parameter(Tape& tape, const Tensor& value, const std::string& name);
  NodeId base_linear(Tape& tape, const LinearLayer& layer, NodeId x);

  std::set<std::string> trainable_;
  std::map<std::string, NodeId> bindings_;
};

/// Records the full model forward; returns the logits node.
NodeId forward_model(Tape& tape, const Model& model, NodeId input, ParameterPolicy& policy);

struct LossResult {
  Tape tape;
  NodeId logits = 0;
  NodeId loss_node = 0;
  double loss = 0.0;
};

/// Mean softmax cross-entropy over the batch.
LossResult model_loss(const Model& model, const LabeledBatch& batch, ParameterPolicy& policy);
LossResult model_loss(const Model& model, const LabeledBatch& batch);

Tensor forward_linear(const LinearLayer& layer, const Tensor& x);
Tensor predict_logits(const Model& model, const Tensor& inputs, ParameterPolicy& policy);
std::vector<int> predict_labels(const Tensor& logits);

/// Central differences (L(θ+h·e_j) − L(θ−h·e_j)) / 2h over every entry of `param`,
/// which `loss` must read by reference.
Tensor finite_diff_gradient(const std::function<double()>& loss, Tensor& param, double step);
/// Model-level variant for a named base parameter.
Tensor finite_diff_gradient(const Model& model, const LabeledBatch& batch, const std::string& param_name,
                            double step);

/// Accuracy of each label, then mean and five-number summary across labels.
FiveNumberSummary per_class_accuracy_summary(std::span<const int> predicted, std::span<const int> labels,
                                             std::size_t num_classes);
FiveNumberSummary per_class_accuracy_summary(const Model& model, const LabeledBatch& batch);
double accuracy(std::span<const int> predicted, std::span<const int> labels);

}  // namespace spruft
