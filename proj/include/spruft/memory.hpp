#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "spruft/adapters.hpp"
#include "spruft/autodiff.hpp"
#include "spruft/layers.hpp"

namespace spruft {

/// Element counts attributed to one layer (or "loss" / "model" for unscoped work).
struct MemoryComponents {
  std::string layer;
  std::size_t trainable_params = 0;
  std::size_t mem_model = 0;       // frozen parameters
  std::size_t mem_ft = 0;          // trainable parameters + their gradients
  std::size_t mem_opt = 0;         // Adam first and second moments
  std::size_t aux_activation = 0;  // gradient-serving cached activations
  std::size_t aux_dropout = 0;     // dropout masks

  std::size_t mem_aux() const { return aux_activation + aux_dropout; }
  /// Stand-in for the "other" column: auxiliary memory that is not dropout.
  std::size_t other() const { return aux_activation; }
  std::size_t total() const { return mem_model + mem_ft + mem_opt + mem_aux(); }
  MemoryComponents& operator+=(const MemoryComponents& o);
};

struct MemoryReport {
  std::vector<MemoryComponents> layers;
  MemoryComponents totals;
  std::vector<CacheLedgerEntry> ledger;
};

/// What is trained: adapters plus any base parameters listed by name.
struct TrainingSetup {
  std::string name;
  AdapterSet adapters;
  std::set<std::string> trainable_base;
  /// Whether the traced step is a training step (LoRA dropout active).
  bool training = true;
};

/// Traces one forward pass (dropout drawn from `dropout_key`) and accounts every component.
MemoryReport measure_training_footprint(const Model& model, const TrainingSetup& setup, const LabeledBatch& batch,
                                        std::uint64_t dropout_key = 0);

struct LayerDelta {
  std::string layer;
  MemoryComponents a;
  MemoryComponents b;
  long long aux_delta() const { return static_cast<long long>(a.mem_aux()) - static_cast<long long>(b.mem_aux()); }
};

struct CacheComparison {
  std::string name_a, name_b;
  std::vector<LayerDelta> layers;
  MemoryComponents total_a, total_b;
  long long aux_delta() const {
    return static_cast<long long>(total_a.mem_aux()) - static_cast<long long>(total_b.mem_aux());
  }
  /// One sentence naming the configuration that caches fewer elements.
  std::string summary() const;
};

CacheComparison compare_configurations(const Model& model, const TrainingSetup& a, const TrainingSetup& b,
                                       const LabeledBatch& batch, std::uint64_t dropout_key = 0);

/// Aligned plain-text table: one row per layer, then the total.
std::string format_memory_table(const MemoryReport& report);
std::string format_comparison_table(const CacheComparison& comparison);

}  // namespace spruft
