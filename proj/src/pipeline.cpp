#include "spruft/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "spruft/errors.hpp"
#include "spruft/rng.hpp"

namespace spruft {

Method parse_method(const std::string& s) {
  if (s == "sprufft") return Method::sprufft;
  if (s == "lora") return Method::lora;
  if (s == "full") return Method::full;
  if (s == "head") return Method::head;
  if (s == "sprufft-dep") return Method::sprufft_dep;
  throw ConfigError("unknown method '" + s + "' (expected sprufft, lora, full, head or sprufft-dep)");
}

Metric parse_metric(const std::string& s) {
  if (s == "l2") return Metric::l2;
  if (s == "taylor") return Metric::taylor;
  if (s == "qm-taylor") return Metric::qm_taylor;
  if (s == "zo-taylor") return Metric::zo_taylor;
  if (s == "random") return Metric::random;
  throw ConfigError("unknown metric '" + s + "' (expected l2, taylor, qm-taylor, zo-taylor or random)");
}

GroupAggregation parse_aggregation(const std::string& s) {
  if (s == "sum") return GroupAggregation::sum;
  if (s == "mean") return GroupAggregation::mean;
  if (s == "max") return GroupAggregation::max;
  throw ConfigError("unknown aggregation '" + s + "' (expected sum, mean or max)");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::sprufft: return "sprufft";
    case Method::lora: return "lora";
    case Method::full: return "full";
    case Method::head: return "head";
    case Method::sprufft_dep: return "sprufft-dep";
  }
  return "?";
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::l2: return "l2";
    case Metric::taylor: return "taylor";
    case Metric::qm_taylor: return "qm-taylor";
    case Metric::zo_taylor: return "zo-taylor";
    case Metric::random: return "random";
  }
  return "?";
}

std::string to_string(GroupAggregation a) {
  switch (a) {
    case GroupAggregation::sum: return "sum";
    case GroupAggregation::mean: return "mean";
    case GroupAggregation::max: return "max";
  }
  return "?";
}

ImportanceEngine::ImportanceEngine(const Model& model, const LabeledBatch& data, Metric metric,
                                   std::vector<std::string> layers, const SpsaConfig& spsa, std::uint64_t random_key)
    : model_(model), metric_(metric), random_key_(random_key) {
  for (const auto& l : layers)
    if (!model.has_linear(l)) throw ConfigError("no linear layer '" + l + "'");
  switch (metric) {
    case Metric::l2:
    case Metric::random:
      break;
    case Metric::taylor:
      gradient_ = weight_gradients(model, layers, data);
      break;
    case Metric::qm_taylor: {
      if (model.num_classes < 2) {
        throw ConfigError("qm-taylor needs labeled data with at least two classes; use taylor instead");
      }
      data.validate(model.num_classes);
      for (std::size_t c = 0; c < model.num_classes; ++c) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < data.size(); ++i)
          if (data.labels[i] == static_cast<int>(c)) rows.push_back(i);
        if (rows.empty()) throw ConfigError("qm-taylor: class " + std::to_string(c) + " has no examples");
        for (auto& [l, g] : weight_gradients(model, layers, data.subset(rows))) class_grads_[l].push_back(std::move(g));
      }
      break;
    }
    case Metric::zo_taylor: {
      ModelObjective objective(model, layers, data, spsa);
      const auto est = spsa_estimate(objective, spsa);
      std::size_t offset = 0;
      for (const auto& seg : objective.segments()) {
        Tensor g({seg.rows, seg.cols});
        std::copy_n(est.estimate.begin() + static_cast<std::ptrdiff_t>(offset), seg.values.size(), g.data().begin());
        offset += seg.values.size();
        gradient_.emplace(seg.name, std::move(g));
      }
      break;
    }
  }
}

std::vector<double> ImportanceEngine::scores(const std::string& layer, Orientation orientation) const {
  const auto& lin = model_.linear(layer);
  const bool rows = orientation == Orientation::rows;
  auto oriented = [&](const Tensor& t) { return rows ? t : transpose(t); };
  switch (metric_) {
    case Metric::l2:
      return rows ? magnitude_importance(lin).scores : column_magnitude_importance(lin).scores;
    case Metric::random:
      return random_importance(rows ? layer : layer + "#columns", rows ? lin.d_out() : lin.d_in(), random_key_).scores;
    case Metric::taylor:
      return taylor_from_gradient(oriented(lin.weight), oriented(gradient_.at(layer)), AggregationForm::sum_of_abs);
    case Metric::zo_taylor:
      return taylor_from_gradient(oriented(lin.weight), oriented(gradient_.at(layer)), AggregationForm::abs_of_sum);
    case Metric::qm_taylor: {
      const auto& grads = class_grads_.at(layer);
      const Tensor w = oriented(lin.weight);
      Tensor m({w.rows(), grads.size()});
      for (std::size_t t = 0; t < grads.size(); ++t) {
        const auto col = taylor_from_gradient(w, oriented(grads[t]), AggregationForm::abs_of_sum);
        for (std::size_t r = 0; r < col.size(); ++r) m(r, t) = col[r];
      }
      return quantiles_mean(ClassScoreMatrix{layer, std::move(m)}).scores;
    }
  }
  throw ContractError("unknown metric");
}

ClassScoreMatrix ImportanceEngine::class_scores(const std::string& layer) const {
  if (metric_ != Metric::qm_taylor) throw ContractError("class scores exist only for qm-taylor");
  const auto& grads = class_grads_.at(layer);
  const auto& w = model_.linear(layer).weight;
  ClassScoreMatrix out{layer, Tensor({w.rows(), grads.size()})};
  for (std::size_t t = 0; t < grads.size(); ++t) {
    const auto col = taylor_from_gradient(w, grads[t], AggregationForm::abs_of_sum);
    for (std::size_t r = 0; r < col.size(); ++r) out.scores(r, t) = col[r];
  }
  return out;
}

void SelectionSpec::validate(const Model& model) const {
  if (rank.has_value() == ratio.has_value()) {
    if (method == Method::full || method == Method::head) {
      if (rank && ratio) throw ConfigError("give at most one of rank and ratio");
    } else {
      throw ConfigError("give exactly one of rank and ratio");
    }
  }
  if (rank && *rank == 0) throw ConfigError("rank must be positive");
  if (ratio && !(*ratio > 0.0 && *ratio <= 1.0)) throw ConfigError("ratio must lie in (0, 1]");
  if (!(lora_alpha > 0.0)) throw ConfigError("lora alpha must be positive");
  if (!(lora_dropout >= 0.0 && lora_dropout < 1.0)) throw ConfigError("lora dropout must lie in [0, 1)");
  if (metric == Metric::qm_taylor && model.num_classes < 2) {
    throw ConfigError("qm-taylor needs labeled data with at least two classes; use taylor instead");
  }
  const auto head = model.head_id();
  for (const auto& l : layers) {
    if (!model.has_linear(l)) throw ConfigError("no linear layer '" + l + "'");
    if (l == head) throw ConfigError("the head is trained fully or not at all; drop it from layers");
  }
  if (metric == Metric::zo_taylor) spsa.validate();
}

std::vector<std::string> default_target_layers(const Model& model) {
  std::vector<std::string> out;
  for (const auto& info : model.linear_layers())
    if (info.role != LayerRole::head) out.push_back(info.id);
  return out;
}

std::vector<std::string> resolve_layers(const Model& model, const SelectionSpec& spec) {
  return spec.layers.empty() ? default_target_layers(model) : spec.layers;
}

std::map<std::string, std::size_t> rows_per_layer(const Model& model, const SelectionSpec& spec) {
  const auto layers = resolve_layers(model, spec);
  std::map<std::string, std::size_t> out;
  if (spec.rank) {
    for (const auto& l : layers) {
      const auto& lin = model.linear(l);
      const std::size_t cap = spec.method == Method::lora ? std::min(lin.d_in(), lin.d_out()) : lin.d_out();
      out[l] = std::min(*spec.rank, cap);
    }
    return out;
  }
  if (!spec.ratio) throw ConfigError("rows_per_layer needs a rank or a ratio");
  const double ratio = spec.method == Method::sprufft_dep ? *spec.ratio / 2.0 : *spec.ratio;
  out = allocate_rows(model, layers, ratio, spec.train_head);
  if (spec.method == Method::lora) {
    // Rank whose A and B together hold about as many scalars as the rows would.
    for (auto& [l, r] : out) {
      const auto& lin = model.linear(l);
      const double exact = static_cast<double>(r * lin.d_in()) / static_cast<double>(lin.d_in() + lin.d_out());
      r = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(exact)), 1, std::min(lin.d_in(), lin.d_out()));
    }
  }
  return out;
}

namespace {

std::size_t group_width(const Model& model, const DependencySpec& dep) {
  const auto& first = dep.members.front();
  const auto& lin = model.linear(first.layer);
  return first.role == DependencyRole::row ? lin.d_out() : lin.d_in();
}

void add_norm_adapters(const Model& model, const SelectionSpec& spec, AdapterSet& adapters) {
  for (const auto& id : model.norm_layers()) {
    const auto& ln = model.norm(id);
    const std::size_t dim = ln.gain.size();
    const std::size_t r =
        spec.rank ? std::min(*spec.rank, dim)
                  : std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(*spec.ratio * dim)), 1, dim);
    std::vector<double> mag(dim);
    for (std::size_t i = 0; i < dim; ++i) mag[i] = std::abs(ln.gain[i]);
    const RowSelection sel = select_top_r(mag, r);
    adapters.vectors.push_back(build_vector_adapter(ln, VectorField::gain, sel));
    adapters.vectors.push_back(build_vector_adapter(ln, VectorField::shift, sel));
  }
}

}  // namespace

PreparedTarget prepare_target(const Model& model, const LabeledBatch& importance_data, const SelectionSpec& spec) {
  model.validate();
  spec.validate(model);
  PreparedTarget out;
  auto& target = out.target;

  if (spec.method == Method::full) {
    const auto names = model.parameter_names();
    target.trainable_base.insert(names.begin(), names.end());
    return out;
  }
  if (spec.method == Method::head || spec.train_head) target.trainable_base = head_parameters(model);
  if (spec.method == Method::head) return out;

  const auto layers = resolve_layers(model, spec);
  const auto counts = rows_per_layer(model, spec);

  if (spec.method == Method::lora) {
    const std::uint64_t key = substream(spec.seed, "lora");
    for (const auto& l : layers) {
      target.adapters.loras.push_back(
          build_lora_adapter(model.linear(l), counts.at(l), spec.lora_alpha, spec.lora_dropout, key));
    }
    if (spec.adapt_norms) add_norm_adapters(model, spec, target.adapters);
    return out;
  }

  // Row selection, optionally with dependency groups.
  std::vector<std::string> scored = layers;
  const bool dep = spec.method == Method::sprufft_dep;
  if (dep) {
    for (const auto& d : model.dependencies)
      for (const auto& m : d.members)
        if (std::find(scored.begin(), scored.end(), m.layer) == scored.end()) scored.push_back(m.layer);
  }
  SpsaConfig spsa = spec.spsa;
  spsa.base_seed = substream(spec.seed, "spsa");
  const ImportanceEngine engine(model, importance_data, spec.metric, scored, spsa, substream(spec.seed, "random"));

  std::map<std::string, std::vector<std::size_t>> row_indices;
  for (const auto& l : layers) {
    ImportanceVector v{l, engine.scores(l)};
    const RowSelection sel = select_top_r(v.scores, counts.at(l));
    row_indices[l] = sel.indices();
    out.selections.emplace(l, sel);
    out.importance.emplace(l, std::move(v));
  }

  std::map<std::string, std::vector<std::size_t>> column_indices;
  if (dep) {
    for (const auto& d : model.dependencies) {
      const std::size_t width = group_width(model, d);
      const std::size_t count =
          spec.rank ? std::min(*spec.rank, width)
                    : std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(*spec.ratio / 2.0 * width)), 1,
                                              width);
      std::vector<std::vector<double>> member_scores;
      for (const auto& m : d.members) {
        member_scores.push_back(
            engine.scores(m.layer, m.role == DependencyRole::row ? Orientation::rows : Orientation::columns));
      }
      std::vector<double> group(width);
      std::vector<double> buf(d.members.size());
      for (std::size_t i = 0; i < width; ++i) {
        for (std::size_t m = 0; m < member_scores.size(); ++m) buf[m] = member_scores[m][i];
        group[i] = aggregate(buf, spec.aggregation);
      }
      const RowSelection sel = select_top_r(group, count);
      out.groups.push_back({d.id, d.members, sel});
      for (const auto& m : d.members) {
        auto& dst = m.role == DependencyRole::row ? row_indices[m.layer] : column_indices[m.layer];
        dst.insert(dst.end(), sel.indices().begin(), sel.indices().end());
      }
    }
  }

  for (auto& [l, idx] : row_indices) {
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    const auto& lin = model.linear(l);
    target.adapters.rows.push_back(build_row_adapter(lin, RowSelection(idx, lin.d_out())));
  }
  for (auto& [l, idx] : column_indices) {
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    const auto& lin = model.linear(l);
    target.adapters.columns.push_back(build_column_adapter(lin, RowSelection(idx, lin.d_in())));
  }
  if (spec.adapt_norms) add_norm_adapters(model, spec, target.adapters);
  return out;
}

}  // namespace spruft
