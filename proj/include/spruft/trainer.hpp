#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "spruft/adapters.hpp"
#include "spruft/layers.hpp"
#include "spruft/stats.hpp"

namespace spruft {

enum class ScheduleKind { constant, cosine, linear };

struct TrainConfig {
  double learning_rate = 1e-2;
  ScheduleKind schedule = ScheduleKind::cosine;
  double min_lr = 1e-9;           // cosine floor
  double decay_rate = 0.01;       // linear: final lr = learning_rate·decay_rate
  double warmup_fraction = 0.03;  // linear only
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Learning rate for 0 ≤ step < total_steps.
double lr_at(const TrainConfig& config, std::size_t step, std::size_t total_steps);

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every named parameter that has a gradient.
void adam_step(AdamState& state, const std::vector<NamedTensor>& params, const std::map<std::string, Tensor>& grads,
               double lr, const TrainConfig& config);

/// What a run optimizes: adapters plus any listed base parameters.
struct TrainTarget {
  AdapterSet adapters;
  std::set<std::string> trainable_base;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  FiveNumberSummary train_per_class;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  FiveNumberSummary val_per_class;
};

struct TrainHistory {
  std::vector<double> step_losses;
  std::vector<EpochMetrics> epochs;
};

/// Adam over shuffled minibatches. Base weights outside `trainable_base` are
/// never written. Throws DivergenceError on a non-finite loss.
TrainHistory train(Model& model, TrainTarget& target, const LabeledBatch& train_data, const LabeledBatch& val_data,
                   const TrainConfig& config);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  FiveNumberSummary per_class;
};
EvalResult evaluate(const Model& model, const AdapterSet& adapters, const LabeledBatch& data);

struct SynthTaskSpec {
  std::size_t classes = 3;
  std::size_t input_dim = 32;
  double separation = 3.0;  // distance between class means, in noise σ
  std::size_t train_size = 600;
  std::size_t val_size = 300;
  /// Empty: balanced training labels. Otherwise one weight per class.
  std::vector<double> class_weights;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthTask {
  LabeledBatch train;
  LabeledBatch val;
};

/// Gaussian clusters with unit noise; class c is centred at (separation/√2)·e_c.
/// Validation labels are always balanced.
SynthTask make_synth_task(const SynthTaskSpec& spec);

/// Rows per backbone layer so that, with the head trained fully, the trainable
/// count lands within one neuron row of ratio·(all model parameters).
std::map<std::string, std::size_t> allocate_rows(const Model& model, std::span<const std::string> layers, double ratio,
                                                 bool head_trained);

/// Base parameter names of the classification head.
std::set<std::string> head_parameters(const Model& model);

}  // namespace spruft
