#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spruft/adapters.hpp"
#include "spruft/layers.hpp"

namespace spruft {

/// One nonnegative score per output neuron of `layer`.
struct ImportanceVector {
  std::string layer;
  std::vector<double> scores;
};

/// Per-neuron, per-class scores, d_out × p.
struct ClassScoreMatrix {
  std::string layer;
  Tensor scores;

  std::size_t classes() const { return scores.cols(); }
};

/// Σ_j |g_ij·w_ij| (sum_of_abs) or |Σ_j g_ij·w_ij| (abs_of_sum) per row.
enum class AggregationForm { sum_of_abs, abs_of_sum };

ImportanceVector magnitude_importance(const LinearLayer& layer);
/// Per-column ℓ2 norms (input-side neurons).
ImportanceVector column_magnitude_importance(const LinearLayer& layer);

std::vector<double> taylor_from_gradient(const Tensor& weight, const Tensor& grad, AggregationForm form);

/// Gradients of the mean loss over `data` with respect to each named layer's weight.
std::map<std::string, Tensor> weight_gradients(const Model& model, std::span<const std::string> layers,
                                               const LabeledBatch& data);

ImportanceVector taylor_importance(const Model& model, const std::string& layer, const LabeledBatch& data,
                                   AggregationForm form = AggregationForm::sum_of_abs);
std::map<std::string, ImportanceVector> taylor_importance(const Model& model, std::span<const std::string> layers,
                                                          const LabeledBatch& data,
                                                          AggregationForm form = AggregationForm::sum_of_abs);

/// Column t scores neurons against the mean loss over the examples of group t.
/// Groups default to the labels, with one group per model class.
ClassScoreMatrix classwise_taylor(const Model& model, const std::string& layer, const LabeledBatch& data,
                                  std::span<const int> groups = {});
std::map<std::string, ClassScoreMatrix> classwise_taylor(const Model& model, std::span<const std::string> layers,
                                                         const LabeledBatch& data, std::span<const int> groups = {});

/// Mean of the 0%, 10%, ..., 100% quantiles of a row.
double quantiles_mean(std::span<const double> row);
ImportanceVector quantiles_mean(const ClassScoreMatrix& scores);

/// A seeded uniform permutation turned into scores, so its top-r is a uniform r-subset.
ImportanceVector random_importance(const std::string& layer, std::size_t d_out, std::uint64_t key);

/// Indices of the r largest scores, ties to the smaller index, sorted ascending.
RowSelection select_top_r(std::span<const double> scores, std::size_t r);
inline RowSelection select_top_r(const ImportanceVector& v, std::size_t r) { return select_top_r(v.scores, r); }

/// Pr[Z > −(g_i − g_j)/√((σ_i² + σ_j²)/2)].
double pair_rank_probability(double g_i, double g_j, double var_i, double var_j);

}  // namespace spruft
