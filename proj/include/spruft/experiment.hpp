#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "spruft/pipeline.hpp"
#include "spruft/serialization.hpp"
#include "spruft/trainer.hpp"

namespace spruft {

struct SpsaStudyConfig {
  std::vector<double> gradient{1.0, 0.5, -0.5, 0.25};
  std::size_t n = 5;
  std::size_t k = 8;
  double epsilon = 1e-3;
  std::size_t single_samples = 10000;  // n = k = 1 moments
  std::size_t replications = 1000;     // n·k moments
  std::vector<double> gaps{0.0, 1.0, 2.0};
  std::size_t rank_replications = 10000;
  double rank_g_j = 1.0;
  std::vector<double> rank_others{0.5, -0.5};
};

struct MemoryConfig {
  std::size_t batch_size = 8;
  bool freeze_all = false;
  std::string name = "A";
  /// Second configuration for an A/B comparison; fields not given inherit from A.
  std::optional<SelectionSpec> compare;
  std::string compare_name = "B";
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  std::filesystem::path base_dir = ".";
  Json model_doc;  // the "model" block as given
  SynthTaskSpec task;
  bool task_input_dim_set = false;
  bool task_classes_set = false;
  SelectionSpec selection;
  std::vector<Metric> report_metrics;
  TrainConfig train;
  bool write_merged_model = true;
  SpsaStudyConfig spsa_study;
  MemoryConfig memory;
  std::filesystem::path merge_model, merge_adapters;
};

/// Parses and validates a config document. Unknown keys anywhere raise ConfigError.
/// `base_dir` resolves relative paths inside the document.
ExperimentConfig parse_experiment_config(const Json& doc, const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Replaces the seed everywhere it flows (model init, data, training, SPSA).
void override_seed(ExperimentConfig& config, std::uint64_t seed);

Model build_model(const ExperimentConfig& config);
SynthTask build_task(const ExperimentConfig& config, const Model& model);

void cmd_importance(const ExperimentConfig& config, const std::filesystem::path& out);
void cmd_train(const ExperimentConfig& config, const std::filesystem::path& out);
void cmd_spsa_study(const ExperimentConfig& config, const std::filesystem::path& out);
void cmd_memory_report(const ExperimentConfig& config, const std::filesystem::path& out);
void cmd_merge(const ExperimentConfig& config, const std::filesystem::path& out);

/// Exit statuses of the command-line tool.
enum ExitCode : int { exit_ok = 0, exit_other = 1, exit_config = 2, exit_divergence = 3, exit_io = 4 };

/// Full command-line entry point: `<command> --config <path> [--seed N] [--out DIR]`.
int run_cli(int argc, const char* const* argv);

}  // namespace spruft
