#include "spruft/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spruft/errors.hpp"
#include "spruft/rng.hpp"
#include "spruft/stats.hpp"

namespace spruft {

ImportanceVector magnitude_importance(const LinearLayer& layer) {
  ImportanceVector v{layer.id, std::vector<double>(layer.d_out())};
  for (std::size_t r = 0; r < layer.d_out(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < layer.d_in(); ++c) s += layer.weight(r, c) * layer.weight(r, c);
    v.scores[r] = std::sqrt(s);
  }
  return v;
}

ImportanceVector column_magnitude_importance(const LinearLayer& layer) {
  ImportanceVector v{layer.id, std::vector<double>(layer.d_in())};
  for (std::size_t c = 0; c < layer.d_in(); ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < layer.d_out(); ++r) s += layer.weight(r, c) * layer.weight(r, c);
    v.scores[c] = std::sqrt(s);
  }
  return v;
}

std::vector<double> taylor_from_gradient(const Tensor& weight, const Tensor& grad, AggregationForm form) {
  if (weight.shape() != grad.shape()) {
    throw DimensionError("taylor: weight " + shape_string(weight.shape()) + " vs gradient " +
                         shape_string(grad.shape()));
  }
  std::vector<double> out(weight.rows());
  for (std::size_t r = 0; r < weight.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < weight.cols(); ++c) {
      const double t = weight(r, c) * grad(r, c);
      acc += form == AggregationForm::sum_of_abs ? std::abs(t) : t;
    }
    out[r] = std::abs(acc);
  }
  return out;
}

std::map<std::string, Tensor> weight_gradients(const Model& model, std::span<const std::string> layers,
                                               const LabeledBatch& data) {
  if (data.size() == 0) throw ContractError("importance needs at least one example");
  std::set<std::string> names;
  for (const auto& l : layers) {
    if (!model.has_linear(l)) throw ContractError("no linear layer '" + l + "'");
    names.insert(l + ".weight");
  }
  BaseParameters policy(names);
  auto result = model_loss(model, data, policy);
  const Gradients grads = result.tape.backward(result.loss_node);
  std::map<std::string, Tensor> out;
  for (const auto& l : layers) out[l] = grads.at(policy.bindings().at(l + ".weight"));
  return out;
}

std::map<std::string, ImportanceVector> taylor_importance(const Model& model, std::span<const std::string> layers,
                                                          const LabeledBatch& data, AggregationForm form) {
  const auto grads = weight_gradients(model, layers, data);
  std::map<std::string, ImportanceVector> out;
  for (const auto& l : layers) out[l] = {l, taylor_from_gradient(model.linear(l).weight, grads.at(l), form)};
  return out;
}

ImportanceVector taylor_importance(const Model& model, const std::string& layer, const LabeledBatch& data,
                                   AggregationForm form) {
  const std::string layers[] = {layer};
  return taylor_importance(model, layers, data, form).at(layer);
}

std::map<std::string, ClassScoreMatrix> classwise_taylor(const Model& model, std::span<const std::string> layers,
                                                         const LabeledBatch& data, std::span<const int> groups) {
  data.validate(model.num_classes);
  std::vector<int> group_of(groups.begin(), groups.end());
  std::size_t p = model.num_classes;
  if (group_of.empty()) {
    group_of = data.labels;
    if (p < 2) throw ContractError("class-wise importance needs at least two labeled classes");
  } else {
    if (group_of.size() != data.size()) throw ContractError("group vector length differs from the batch");
    const int top = *std::max_element(group_of.begin(), group_of.end());
    if (*std::min_element(group_of.begin(), group_of.end()) < 0) throw ContractError("negative group id");
    p = static_cast<std::size_t>(top) + 1;
  }
  std::map<std::string, ClassScoreMatrix> out;
  for (const auto& l : layers) out[l] = {l, Tensor({model.linear(l).d_out(), p})};
  for (std::size_t t = 0; t < p; ++t) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < group_of.size(); ++i)
      if (group_of[i] == static_cast<int>(t)) rows.push_back(i);
    if (rows.empty()) throw ContractError("class " + std::to_string(t) + " has no examples");
    const auto grads = weight_gradients(model, layers, data.subset(rows));
    for (const auto& l : layers) {
      const auto col = taylor_from_gradient(model.linear(l).weight, grads.at(l), AggregationForm::abs_of_sum);
      for (std::size_t r = 0; r < col.size(); ++r) out[l].scores(r, t) = col[r];
    }
  }
  return out;
}

ClassScoreMatrix classwise_taylor(const Model& model, const std::string& layer, const LabeledBatch& data,
                                  std::span<const int> groups) {
  const std::string layers[] = {layer};
  return classwise_taylor(model, layers, data, groups).at(layer);
}

double quantiles_mean(std::span<const double> row) {
  if (row.empty()) throw ContractError("quantiles-mean of an empty row");
  std::vector<double> sorted(row.begin(), row.end());
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (int l = 0; l <= 10; ++l) total += quantile_sorted(sorted, l / 10.0);
  return total / 11.0;
}

ImportanceVector quantiles_mean(const ClassScoreMatrix& scores) {
  const std::size_t p = scores.classes();
  ImportanceVector v{scores.layer, std::vector<double>(scores.scores.rows())};
  for (std::size_t r = 0; r < v.scores.size(); ++r) {
    v.scores[r] = quantiles_mean(scores.scores.data().subspan(r * p, p));
  }
  return v;
}

ImportanceVector random_importance(const std::string& layer, std::size_t d_out, std::uint64_t key) {
  std::vector<std::size_t> perm(d_out);
  std::iota(perm.begin(), perm.end(), 0);
  RngStream rng(substream(key, layer));
  for (std::size_t i = d_out; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  ImportanceVector v{layer, std::vector<double>(d_out)};
  for (std::size_t pos = 0; pos < d_out; ++pos) v.scores[perm[pos]] = static_cast<double>(d_out - pos);
  return v;
}

RowSelection select_top_r(std::span<const double> scores, std::size_t r) {
  if (r < 1 || r > scores.size()) {
    throw ContractError("select_top_r: r = " + std::to_string(r) + " outside [1, " + std::to_string(scores.size()) +
                        "]");
  }
  for (double s : scores)
    if (std::isnan(s)) throw ContractError("select_top_r: NaN score");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(r);
  std::sort(order.begin(), order.end());
  return RowSelection(std::move(order), scores.size());
}

double pair_rank_probability(double g_i, double g_j, double var_i, double var_j) {
  if (!(var_i > 0.0) || !(var_j > 0.0)) throw ContractError("pair_rank_probability: variances must be positive");
  return normal_upper_tail(-(g_i - g_j) / std::sqrt((var_i + var_j) / 2.0));
}

}  // namespace spruft
