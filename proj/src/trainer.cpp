#include "spruft/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "spruft/errors.hpp"
#include "spruft/rng.hpp"

namespace spruft {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(min_lr >= 0.0)) throw ConfigError("min_lr must be nonnegative");
  if (!(decay_rate >= 0.0)) throw ConfigError("decay_rate must be nonnegative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
}

double lr_at(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  if (step >= total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  const double lr = config.learning_rate;
  const double last = static_cast<double>(total_steps - 1);
  const double s = static_cast<double>(step);
  switch (config.schedule) {
    case ScheduleKind::constant:
      return lr;
    case ScheduleKind::cosine: {
      const double progress = total_steps == 1 ? 0.0 : s / last;
      return config.min_lr + 0.5 * (lr - config.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
    }
    case ScheduleKind::linear: {
      const auto warmup = static_cast<std::size_t>(std::llround(config.warmup_fraction * static_cast<double>(total_steps)));
      if (step < warmup) return lr * (s + 1.0) / static_cast<double>(warmup + 1);
      const double span = last - static_cast<double>(warmup);
      const double progress = span <= 0.0 ? 0.0 : (s - static_cast<double>(warmup)) / span;
      return lr * (1.0 - (1.0 - config.decay_rate) * progress);
    }
  }
  throw ContractError("lr_at: unknown schedule");
}

void adam_step(AdamState& state, const std::vector<NamedTensor>& params, const std::map<std::string, Tensor>& grads,
               double lr, const TrainConfig& config) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (const auto& p : params) {
    const auto g = grads.find(p.name);
    if (g == grads.end()) continue;
    Tensor& theta = *p.tensor;
    if (g->second.shape() != theta.shape()) throw DimensionError("adam: gradient shape differs for '" + p.name + "'");
    auto& m = state.m.try_emplace(p.name, theta.shape()).first->second;
    auto& v = state.v.try_emplace(p.name, theta.shape()).first->second;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g->second[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.adam_eps);
    }
  }
}

EvalResult evaluate(const Model& model, const AdapterSet& adapters, const LabeledBatch& data) {
  AdaptedPolicy policy(adapters);
  const auto r = model_loss(model, data, policy);
  const auto predicted = predict_labels(r.tape.value(r.logits));
  EvalResult out;
  out.loss = r.loss;
  out.accuracy = accuracy(predicted, data.labels);
  out.per_class = per_class_accuracy_summary(predicted, data.labels, model.num_classes);
  return out;
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t key) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(key);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

}  // namespace

TrainHistory train(Model& model, TrainTarget& target, const LabeledBatch& train_data, const LabeledBatch& val_data,
                   const TrainConfig& config) {
  config.validate();
  model.validate();
  target.adapters.validate(model);
  train_data.validate(model.num_classes);
  val_data.validate(model.num_classes);
  TrainHistory history;
  if (config.epochs == 0) return history;

  std::vector<NamedTensor> params = trainable_parameters(target.adapters).tensors;
  for (const auto& name : target.trainable_base) params.push_back({name, &model.parameter(name)});

  const std::size_t n = train_data.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = steps_per_epoch * config.epochs;
  const std::uint64_t data_key = substream(config.seed, "data");
  const std::uint64_t dropout_key = substream(config.seed, "dropout");
  AdamState adam;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled(n, combine_keys(data_key, epoch));
    for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
      const std::size_t end = std::min(n, start + config.batch_size);
      const LabeledBatch batch = train_data.subset(std::span<const std::size_t>(order).subspan(start, end - start));
      AdaptedPolicy policy(target.adapters, target.trainable_base, true, combine_keys(dropout_key, step));
      auto result = model_loss(model, batch, policy);
      if (!std::isfinite(result.loss)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      history.step_losses.push_back(result.loss);
      const Gradients grads = result.tape.backward(result.loss_node);
      std::map<std::string, Tensor> named;
      for (const auto& [name, id] : policy.bindings()) named.emplace(name, grads.at(id));
      adam_step(adam, params, named, lr_at(config, step, total), config);
    }
    const EvalResult tr = evaluate(model, target.adapters, train_data);
    const EvalResult va = evaluate(model, target.adapters, val_data);
    if (!std::isfinite(tr.loss) || !std::isfinite(va.loss)) {
      throw DivergenceError("non-finite evaluation loss after epoch " + std::to_string(epoch));
    }
    history.epochs.push_back({epoch + 1, tr.loss, tr.accuracy, tr.per_class, va.loss, va.accuracy, va.per_class});
  }
  return history;
}

void SynthTaskSpec::validate() const {
  if (classes < 2) throw ConfigError("task: at least two classes are required");
  if (input_dim < classes) throw ConfigError("task: input_dim must be at least the class count");
  if (!(separation >= 0.0)) throw ConfigError("task: separation must be nonnegative");
  if (train_size < classes || val_size < classes) throw ConfigError("task: each split needs one example per class");
  if (!class_weights.empty()) {
    if (class_weights.size() != classes) throw ConfigError("task: class_weights needs one entry per class");
    for (double w : class_weights)
      if (!(w > 0.0)) throw ConfigError("task: class weights must be positive");
  }
}

namespace {

// Largest-remainder split of `total` by weights; an empty class borrows from the largest.
std::vector<std::size_t> class_counts(std::size_t total, const std::vector<double>& weights) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  const std::size_t p = weights.size();
  std::vector<std::size_t> counts(p);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t used = 0;
  for (std::size_t c = 0; c < p; ++c) {
    const double exact = static_cast<double>(total) * weights[c] / wsum;
    counts[c] = static_cast<std::size_t>(std::floor(exact));
    used += counts[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 0; used < total; ++i, ++used) ++counts[remainders[i % p].second];
  for (auto& n : counts) {
    if (n > 0) continue;
    --*std::max_element(counts.begin(), counts.end());
    n = 1;
  }
  return counts;
}

LabeledBatch sample_split(const SynthTaskSpec& spec, std::size_t size, const std::vector<double>& weights,
                          std::uint64_t key) {
  const auto counts = class_counts(size, weights);
  std::vector<int> labels;
  for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], static_cast<int>(c));
  RngStream rng(key);
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);
  const double offset = spec.separation / std::numbers::sqrt2;
  Tensor x({size, spec.input_dim});
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t d = 0; d < spec.input_dim; ++d) x(i, d) = rng.normal();
    x(i, static_cast<std::size_t>(labels[i])) += offset;
  }
  return {std::move(x), std::move(labels)};
}

}  // namespace

SynthTask make_synth_task(const SynthTaskSpec& spec) {
  spec.validate();
  const std::vector<double> uniform(spec.classes, 1.0);
  const auto& train_weights = spec.class_weights.empty() ? uniform : spec.class_weights;
  const std::uint64_t key = substream(spec.seed, "data");
  return {sample_split(spec, spec.train_size, train_weights, combine_keys(key, 0)),
          sample_split(spec, spec.val_size, uniform, combine_keys(key, 1))};
}

std::set<std::string> head_parameters(const Model& model) {
  const auto& head = model.linear(model.head_id());
  std::set<std::string> out{head.id + ".weight"};
  if (head.bias) out.insert(head.id + ".bias");
  return out;
}

std::map<std::string, std::size_t> allocate_rows(const Model& model, std::span<const std::string> layers, double ratio,
                                                 bool head_trained) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("ratio must lie in (0, 1]");
  if (layers.empty()) throw ConfigError("no layers to allocate rows to");
  const double budget = ratio * static_cast<double>(model.parameter_count());
  double remaining = budget;
  if (head_trained) {
    for (const auto& name : head_parameters(model)) remaining -= static_cast<double>(model.parameter(name).size());
  }
  std::size_t weights_total = 0;
  for (const auto& l : layers) weights_total += model.linear(l).weight.size();

  std::map<std::string, std::size_t> rows;
  std::vector<std::pair<double, std::string>> remainders;
  double spent = 0.0;
  for (const auto& l : layers) {
    const auto& layer = model.linear(l);
    const double share = std::max(remaining, 0.0) * static_cast<double>(layer.weight.size()) /
                         static_cast<double>(weights_total);
    const double exact = share / static_cast<double>(layer.d_in());
    const auto r = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(exact)), 1, layer.d_out());
    rows[l] = r;
    spent += static_cast<double>(r * layer.d_in());
    remainders.emplace_back(exact - std::floor(exact), l);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  bool added = true;
  while (added) {
    added = false;
    for (const auto& [_, l] : remainders) {
      const auto& layer = model.linear(l);
      if (rows[l] < layer.d_out() && spent + static_cast<double>(layer.d_in()) <= remaining) {
        ++rows[l];
        spent += static_cast<double>(layer.d_in());
        added = true;
        break;
      }
    }
  }
  return rows;
}

}  // namespace spruft
