#include "spruft/spsa.hpp"

#include <cmath>
#include <numeric>

#include "spruft/errors.hpp"
#include "spruft/rng.hpp"
#include "spruft/stats.hpp"

namespace spruft {

void SpsaConfig::validate() const {
  if (n < 1) throw ConfigError("spsa: n must be at least 1");
  if (k < 1) throw ConfigError("spsa: k must be at least 1");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("spsa: epsilon must be positive");
}

std::size_t PerturbableObjective::dimension() {
  std::size_t d = 0;
  for (const auto& s : segments()) d += s.values.size();
  return d;
}

QuadraticObjective::QuadraticObjective(Tensor theta, Tensor curvature, Tensor center, std::size_t sets)
    : theta_(std::move(theta)), curvature_(std::move(curvature)), center_(std::move(center)), sets_(sets) {
  if (curvature_.shape() != theta_.shape() || center_.shape() != theta_.shape()) {
    throw DimensionError("quadratic objective: curvature and center must match theta");
  }
  if (sets_ == 0) throw ContractError("quadratic objective needs at least one set");
}

QuadraticObjective QuadraticObjective::with_gradient(Tensor theta, const Tensor& gradient, std::size_t sets) {
  Tensor center = theta - gradient;
  Tensor ones(theta.shape(), 1.0);
  return QuadraticObjective(std::move(theta), std::move(ones), std::move(center), sets);
}

std::vector<ParameterSegment> QuadraticObjective::segments() {
  return {{"theta", theta_.data(), theta_.rows(), theta_.cols()}};
}

double QuadraticObjective::loss(std::size_t set) {
  if (set >= sets_) throw ContractError("quadratic objective: set index out of range");
  double s = 0.0;
  for (std::size_t i = 0; i < theta_.size(); ++i) {
    const double d = theta_[i] - center_[i];
    s += 0.5 * curvature_[i] * d * d;
  }
  return s;
}

Tensor QuadraticObjective::gradient() const {
  Tensor g(theta_.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = curvature_[i] * (theta_[i] - center_[i]);
  return g;
}

std::vector<LabeledBatch> calibration_sets(const LabeledBatch& data, std::size_t k, std::uint64_t key) {
  if (k == 0) throw ContractError("calibration sets: k must be positive");
  if (data.size() < k) {
    throw ContractError("calibration sets: " + std::to_string(data.size()) + " examples cannot fill " +
                        std::to_string(k) + " sets");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(key);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t per = data.size() / k;
  std::vector<LabeledBatch> sets;
  sets.reserve(k);
  for (std::size_t s = 0; s < k; ++s) {
    sets.push_back(data.subset(std::span<const std::size_t>(order).subspan(s * per, per)));
  }
  return sets;
}

ModelObjective::ModelObjective(const Model& model, std::vector<std::string> layers, const LabeledBatch& data,
                               const SpsaConfig& config)
    : model_(model), layers_(std::move(layers)) {
  config.validate();
  data.validate(model.num_classes);
  for (const auto& l : layers_) (void)model_.linear(l);
  sets_ = calibration_sets(data, config.k, substream(config.base_seed, "calibration"));
  if (config.subsample > 0) {
    for (auto& s : sets_) {
      if (s.size() <= config.subsample) continue;
      std::vector<std::size_t> head(config.subsample);
      std::iota(head.begin(), head.end(), 0);
      s = s.subset(head);
    }
  }
}

std::vector<ParameterSegment> ModelObjective::segments() {
  std::vector<ParameterSegment> out;
  for (const auto& l : layers_) {
    auto& w = model_.linear(l).weight;
    out.push_back({l, w.data(), w.rows(), w.cols()});
  }
  return out;
}

double ModelObjective::loss(std::size_t set) { return model_loss(model_, sets_.at(set)).loss; }

std::uint64_t perturbation_key(std::uint64_t base_seed, std::size_t set, std::size_t index) {
  return combine_keys(combine_keys(substream(base_seed, "spsa"), set), index);
}

namespace {

// Adds step·z to every coordinate, z regenerated from the counter stream.
void perturb(std::vector<ParameterSegment>& segments, const CounterRng& z, double step) {
  std::uint64_t c = 0;
  for (auto& s : segments)
    for (double& v : s.values) v += step * z.normal(c++);
}

}  // namespace

GradientEstimate spsa_single(PerturbableObjective& objective, std::size_t set, double epsilon, std::uint64_t key) {
  if (!(epsilon > 0.0)) throw ContractError("spsa: epsilon must be positive");
  auto segments = objective.segments();
  const CounterRng z(key);
  perturb(segments, z, epsilon);
  const double up = objective.loss(set);
  perturb(segments, z, -2.0 * epsilon);
  const double down = objective.loss(set);
  perturb(segments, z, epsilon);
  const double slope = (up - down) / (2.0 * epsilon);
  GradientEstimate est;
  est.samples = 1;
  est.estimate.reserve(objective.dimension());
  std::uint64_t c = 0;
  for (const auto& s : segments)
    for (std::size_t i = 0; i < s.values.size(); ++i) est.estimate.push_back(slope * z.normal(c++));
  return est;
}

GradientEstimate spsa_estimate(PerturbableObjective& objective, const SpsaConfig& config, bool with_variance) {
  config.validate();
  if (config.k > objective.set_count()) {
    throw ContractError("spsa: k = " + std::to_string(config.k) + " exceeds the " +
                        std::to_string(objective.set_count()) + " available calibration sets");
  }
  const std::size_t d = objective.dimension();
  std::vector<CompensatedSum> sums(d);
  std::vector<RunningMoments> moments(with_variance ? d : 0);
  for (std::size_t set = 0; set < config.k; ++set) {
    for (std::size_t i = 0; i < config.n; ++i) {
      const auto single = spsa_single(objective, set, config.epsilon, perturbation_key(config.base_seed, set, i));
      for (std::size_t c = 0; c < d; ++c) {
        sums[c].add(single.estimate[c]);
        if (with_variance) moments[c].add(single.estimate[c]);
      }
    }
  }
  GradientEstimate out;
  out.samples = config.n * config.k;
  out.estimate.resize(d);
  for (std::size_t c = 0; c < d; ++c) out.estimate[c] = sums[c].value() / static_cast<double>(out.samples);
  if (with_variance) {
    out.variance.resize(d);
    for (std::size_t c = 0; c < d; ++c) out.variance[c] = moments[c].variance();
  }
  return out;
}

std::map<std::string, ImportanceVector> row_scores(const std::vector<ParameterSegment>& segments,
                                                   std::span<const double> estimate) {
  std::map<std::string, ImportanceVector> out;
  std::size_t offset = 0;
  for (const auto& s : segments) {
    if (s.rows * s.cols != s.values.size()) throw ContractError("segment '" + s.name + "' has an inconsistent layout");
    ImportanceVector v{s.name, std::vector<double>(s.rows)};
    for (std::size_t r = 0; r < s.rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < s.cols; ++c) acc += s.values[r * s.cols + c] * estimate[offset + r * s.cols + c];
      v.scores[r] = std::abs(acc);
    }
    offset += s.values.size();
    out[s.name] = std::move(v);
  }
  if (offset != estimate.size()) throw ContractError("estimate length differs from the segments");
  return out;
}

std::map<std::string, ImportanceVector> zo_taylor(PerturbableObjective& objective, const SpsaConfig& config) {
  const auto est = spsa_estimate(objective, config);
  return row_scores(objective.segments(), est.estimate);
}

std::map<std::string, ImportanceVector> zo_taylor(const Model& model, std::span<const std::string> layers,
                                                  const LabeledBatch& data, const SpsaConfig& config) {
  ModelObjective objective(model, {layers.begin(), layers.end()}, data, config);
  return zo_taylor(objective, config);
}

}  // namespace spruft
