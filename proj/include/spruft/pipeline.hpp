#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spruft/adapters.hpp"
#include "spruft/importance.hpp"
#include "spruft/layers.hpp"
#include "spruft/spsa.hpp"
#include "spruft/trainer.hpp"

namespace spruft {

enum class Method { sprufft, lora, full, head, sprufft_dep };
enum class Metric { l2, taylor, qm_taylor, zo_taylor, random };
enum class Orientation { rows, columns };

Method parse_method(const std::string& s);
Metric parse_metric(const std::string& s);
GroupAggregation parse_aggregation(const std::string& s);
std::string to_string(Method m);
std::string to_string(Metric m);
std::string to_string(GroupAggregation a);

/// Scores output neurons (rows) or input neurons (columns) of linear layers
/// under one metric. Gradients and SPSA estimates are computed once, up front.
class ImportanceEngine {
 public:
  ImportanceEngine(const Model& model, const LabeledBatch& data, Metric metric, std::vector<std::string> layers,
                   const SpsaConfig& spsa, std::uint64_t random_key);

  Metric metric() const { return metric_; }
  std::vector<double> scores(const std::string& layer, Orientation orientation = Orientation::rows) const;
  /// Per-class row scores; only for qm-taylor.
  ClassScoreMatrix class_scores(const std::string& layer) const;

 private:
  const Model& model_;
  Metric metric_;
  std::uint64_t random_key_;
  std::map<std::string, Tensor> gradient_;                  // taylor, zo-taylor (estimate)
  std::map<std::string, std::vector<Tensor>> class_grads_;  // qm-taylor
};

/// Everything needed to turn a model into a training target.
struct SelectionSpec {
  Method method = Method::sprufft;
  Metric metric = Metric::l2;
  std::optional<std::size_t> rank;
  std::optional<double> ratio;
  std::vector<std::string> layers;  // empty: every linear layer except the head
  bool train_head = true;
  bool adapt_norms = false;
  double lora_alpha = 16.0;
  double lora_dropout = 0.1;
  GroupAggregation aggregation = GroupAggregation::sum;
  SpsaConfig spsa;
  std::uint64_t seed = 0;

  void validate(const Model& model) const;
};

struct PreparedTarget {
  TrainTarget target;
  std::map<std::string, ImportanceVector> importance;  // row scores used for selection
  std::map<std::string, RowSelection> selections;
  std::vector<DependencyGroup> groups;
};

std::vector<std::string> default_target_layers(const Model& model);
std::vector<std::string> resolve_layers(const Model& model, const SelectionSpec& spec);

/// Importance → selection → adapters (or base parameter sets for full / head).
PreparedTarget prepare_target(const Model& model, const LabeledBatch& importance_data, const SelectionSpec& spec);

/// Rows (or LoRA rank) per layer implied by a rank or ratio setting.
std::map<std::string, std::size_t> rows_per_layer(const Model& model, const SelectionSpec& spec);

}  // namespace spruft
