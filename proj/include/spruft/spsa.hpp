#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spruft/importance.hpp"
#include "spruft/layers.hpp"

namespace spruft {

struct SpsaConfig {
  std::size_t n = 5;          // perturbations per calibration set
  std::size_t k = 8;          // calibration sets; 256 at large scale
  double epsilon = 1e-3;
  std::uint64_t base_seed = 0;
  std::size_t subsample = 0;  // examples per set used by the loss, 0 = all

  void validate() const;
};

/// A contiguous block of parameters viewed as rows × cols.
struct ParameterSegment {
  std::string name;
  std::span<double> values;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Parameters that can be perturbed in place, and a loss per calibration set.
class PerturbableObjective {
 public:
  virtual ~PerturbableObjective() = default;
  virtual std::vector<ParameterSegment> segments() = 0;
  virtual double loss(std::size_t set) = 0;
  virtual std::size_t set_count() const = 0;

  std::size_t dimension();
};

/// L(θ) = ½ Σ a_i (θ_i − c_i)², identical on every set; ∇L = a ⊙ (θ − c).
class QuadraticObjective : public PerturbableObjective {
 public:
  /// `theta` is rows × cols; curvature and center share its shape.
  QuadraticObjective(Tensor theta, Tensor curvature, Tensor center, std::size_t sets = 1);
  /// Curvature one and center θ − g, so the gradient at θ is exactly g.
  static QuadraticObjective with_gradient(Tensor theta, const Tensor& gradient, std::size_t sets = 1);

  std::vector<ParameterSegment> segments() override;
  double loss(std::size_t set) override;
  std::size_t set_count() const override { return sets_; }

  Tensor gradient() const;
  const Tensor& theta() const { return theta_; }

 private:
  Tensor theta_, curvature_, center_;
  std::size_t sets_;
};

/// Mean cross-entropy of a private model copy over k disjoint calibration sets;
/// the perturbed parameters are the weights of the named layers.
class ModelObjective : public PerturbableObjective {
 public:
  ModelObjective(const Model& model, std::vector<std::string> layers, const LabeledBatch& data, const SpsaConfig& config);

  std::vector<ParameterSegment> segments() override;
  double loss(std::size_t set) override;
  std::size_t set_count() const override { return sets_.size(); }

  const Model& model() const { return model_; }
  const LabeledBatch& calibration_set(std::size_t i) const { return sets_.at(i); }

 private:
  Model model_;
  std::vector<std::string> layers_;
  std::vector<LabeledBatch> sets_;
};

/// k disjoint equal slices of a seeded shuffle; the remainder is dropped.
std::vector<LabeledBatch> calibration_sets(const LabeledBatch& data, std::size_t k, std::uint64_t key);

struct GradientEstimate {
  std::vector<double> estimate;
  std::size_t samples = 0;
  /// Per-coordinate sample variance of the single estimates (empty unless requested).
  std::vector<double> variance;
};

/// Key of the z used for perturbation `index` on calibration set `set`.
std::uint64_t perturbation_key(std::uint64_t base_seed, std::size_t set, std::size_t index);

/// One two-point estimate (L(θ+εz) − L(θ−εz))/(2ε)·z. z is regenerated from
/// `key` in each of its three passes and never stored.
GradientEstimate spsa_single(PerturbableObjective& objective, std::size_t set, double epsilon, std::uint64_t key);

/// Average of n estimates on each of the first k sets (n·k in total).
GradientEstimate spsa_estimate(PerturbableObjective& objective, const SpsaConfig& config, bool with_variance = false);

/// Per-row |θ_rowᵀ ĝ_row| for every segment, from an n·k estimate.
std::map<std::string, ImportanceVector> zo_taylor(PerturbableObjective& objective, const SpsaConfig& config);
/// Same, over the weights of `layers`; segment names are layer ids.
std::map<std::string, ImportanceVector> zo_taylor(const Model& model, std::span<const std::string> layers,
                                                  const LabeledBatch& data, const SpsaConfig& config);

/// Row scores from a flat estimate aligned with `segments`.
std::map<std::string, ImportanceVector> row_scores(const std::vector<ParameterSegment>& segments,
                                                   std::span<const double> estimate);

}  // namespace spruft
