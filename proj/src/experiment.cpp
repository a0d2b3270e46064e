#include "spruft/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "CLI11.hpp"

#include "spruft/errors.hpp"
#include "spruft/memory.hpp"
#include "spruft/rng.hpp"
#include "spruft/spsa_study.hpp"

namespace spruft {

namespace fs = std::filesystem;

namespace {

template <class T>
T get(const Json& obj, const char* key, const T& fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": key '" + key + "' has the wrong type");
  }
}

const Json& object_at(const Json& obj, const char* key, const std::string& where) {
  const Json& j = obj.at(key);
  if (!j.is_object()) throw ConfigError(where + ": '" + key + "' must be an object");
  return j;
}

ScheduleKind parse_schedule(const std::string& s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "linear") return ScheduleKind::linear;
  if (s == "constant") return ScheduleKind::constant;
  throw ConfigError("unknown schedule '" + s + "' (expected cosine, linear or constant)");
}

std::string schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::constant: return "constant";
  }
  return "?";
}

// Applies the selection keys present in `obj` on top of `spec`.
void parse_selection(const Json& obj, SelectionSpec& spec, const std::string& where) {
  if (obj.contains("method")) spec.method = parse_method(get<std::string>(obj, "method", "", where));
  if (obj.contains("metric")) spec.metric = parse_metric(get<std::string>(obj, "metric", "", where));
  if (obj.contains("rank") && obj.contains("ratio")) throw ConfigError(where + ": give exactly one of rank and ratio");
  if (obj.contains("rank")) {
    const auto r = get<long long>(obj, "rank", 0, where);
    if (r <= 0) throw ConfigError(where + ": rank must be a positive integer");
    spec.rank = static_cast<std::size_t>(r);
    spec.ratio.reset();
  }
  if (obj.contains("ratio")) {
    spec.ratio = get<double>(obj, "ratio", 0.0, where);
    spec.rank.reset();
  }
  if (obj.contains("layers")) spec.layers = get<std::vector<std::string>>(obj, "layers", {}, where);
  spec.train_head = get<bool>(obj, "train_head", spec.train_head, where);
  spec.adapt_norms = get<bool>(obj, "adapt_norms", spec.adapt_norms, where);
  if (obj.contains("aggregation")) spec.aggregation = parse_aggregation(get<std::string>(obj, "aggregation", "", where));
  if (obj.contains("lora")) {
    const Json& l = object_at(obj, "lora", where);
    reject_unknown_keys(l, {"alpha", "dropout"}, where + ".lora");
    spec.lora_alpha = get<double>(l, "alpha", spec.lora_alpha, where + ".lora");
    spec.lora_dropout = get<double>(l, "dropout", spec.lora_dropout, where + ".lora");
  }
}

void check_selection_shape(const SelectionSpec& spec, const std::string& where) {
  if (spec.ratio && !(*spec.ratio > 0.0 && *spec.ratio <= 1.0)) throw ConfigError(where + ": ratio must lie in (0, 1]");
  if (!(spec.lora_alpha > 0.0)) throw ConfigError(where + ": lora alpha must be positive");
  if (!(spec.lora_dropout >= 0.0 && spec.lora_dropout < 1.0)) throw ConfigError(where + ": lora dropout must lie in [0, 1)");
}

const char* qm_remedy =
    "metric qm-taylor needs labeled data with at least two classes (it averages per-class scores); "
    "use metric taylor for single-class data";

std::size_t declared_classes(const ExperimentConfig& c) {
  if (c.task_classes_set) return c.task.classes;
  for (const char* kind : {"mlp", "transformer"}) {
    if (c.model_doc.contains(kind)) return c.model_doc.at(kind).value("num_classes", std::size_t{3});
  }
  return 0;  // unknown until the model is loaded
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

}  // namespace

ExperimentConfig parse_experiment_config(const Json& doc, const fs::path& base_dir) {
  const std::string top = "config";
  reject_unknown_keys(doc, {"description", "seed", "out", "model", "task", "method", "metric", "rank", "ratio",
                            "layers", "train_head", "adapt_norms", "aggregation", "lora", "train", "spsa",
                            "importance", "memory", "spsa_study", "merge", "write_merged_model"},
                      top);
  ExperimentConfig c;
  c.base_dir = base_dir;
  const auto seed = get<long long>(doc, "seed", 0, top);
  if (seed < 0) throw ConfigError("config: seed must be nonnegative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.out = resolve(base_dir, get<std::string>(doc, "out", "out", top));
  c.write_merged_model = get<bool>(doc, "write_merged_model", true, top);

  if (!doc.contains("model")) throw ConfigError("config: missing 'model'");
  c.model_doc = object_at(doc, "model", top);
  {
    const std::string where = "config.model";
    reject_unknown_keys(c.model_doc, {"mlp", "transformer", "path", "inline", "zero_input_columns"}, where);
    int sources = 0;
    for (const char* k : {"mlp", "transformer", "path", "inline"}) sources += c.model_doc.contains(k);
    if (sources != 1) throw ConfigError(where + ": give exactly one of mlp, transformer, path or inline");
    if (c.model_doc.contains("zero_input_columns") && !c.model_doc.contains("mlp") &&
        !c.model_doc.contains("transformer")) {
      throw ConfigError(where + ": zero_input_columns applies only to mlp or transformer models");
    }
    if (c.model_doc.contains("mlp")) {
      reject_unknown_keys(object_at(c.model_doc, "mlp", where), {"input_dim", "hidden", "num_classes"}, where + ".mlp");
    }
    if (c.model_doc.contains("transformer")) {
      reject_unknown_keys(object_at(c.model_doc, "transformer", where),
                          {"seq_len", "token_dim", "d_model", "mlp_hidden", "num_classes"}, where + ".transformer");
    }
    if (c.model_doc.contains("path")) {
      c.model_doc["path"] = resolve(base_dir, get<std::string>(c.model_doc, "path", "", where)).string();
    }
  }

  if (doc.contains("task")) {
    const std::string where = "config.task";
    const Json& t = object_at(doc, "task", top);
    reject_unknown_keys(t, {"classes", "input_dim", "separation", "train_size", "val_size", "class_weights"}, where);
    c.task_classes_set = t.contains("classes");
    c.task_input_dim_set = t.contains("input_dim");
    c.task.classes = get<std::size_t>(t, "classes", c.task.classes, where);
    c.task.input_dim = get<std::size_t>(t, "input_dim", c.task.input_dim, where);
    c.task.separation = get<double>(t, "separation", c.task.separation, where);
    c.task.train_size = get<std::size_t>(t, "train_size", c.task.train_size, where);
    c.task.val_size = get<std::size_t>(t, "val_size", c.task.val_size, where);
    c.task.class_weights = get<std::vector<double>>(t, "class_weights", {}, where);
  }

  parse_selection(doc, c.selection, top);
  check_selection_shape(c.selection, top);
  if (c.selection.metric == Metric::qm_taylor && declared_classes(c) == 1) throw ConfigError(qm_remedy);

  if (doc.contains("train")) {
    const std::string where = "config.train";
    const Json& t = object_at(doc, "train", top);
    reject_unknown_keys(t, {"learning_rate", "schedule", "min_lr", "decay_rate", "warmup_fraction", "epochs",
                            "batch_size", "beta1", "beta2", "adam_eps"},
                        where);
    auto& tc = c.train;
    tc.learning_rate = get<double>(t, "learning_rate", tc.learning_rate, where);
    if (t.contains("schedule")) tc.schedule = parse_schedule(get<std::string>(t, "schedule", "", where));
    tc.min_lr = get<double>(t, "min_lr", tc.min_lr, where);
    tc.decay_rate = get<double>(t, "decay_rate", tc.decay_rate, where);
    tc.warmup_fraction = get<double>(t, "warmup_fraction", tc.warmup_fraction, where);
    tc.epochs = get<std::size_t>(t, "epochs", tc.epochs, where);
    tc.batch_size = get<std::size_t>(t, "batch_size", tc.batch_size, where);
    tc.beta1 = get<double>(t, "beta1", tc.beta1, where);
    tc.beta2 = get<double>(t, "beta2", tc.beta2, where);
    tc.adam_eps = get<double>(t, "adam_eps", tc.adam_eps, where);
  }
  c.train.validate();

  if (doc.contains("spsa")) {
    const std::string where = "config.spsa";
    const Json& s = object_at(doc, "spsa", top);
    reject_unknown_keys(s, {"n", "k", "epsilon", "subsample"}, where);
    auto& sc = c.selection.spsa;
    sc.n = get<std::size_t>(s, "n", sc.n, where);
    sc.k = get<std::size_t>(s, "k", sc.k, where);
    sc.epsilon = get<double>(s, "epsilon", sc.epsilon, where);
    sc.subsample = get<std::size_t>(s, "subsample", sc.subsample, where);
  }
  c.selection.spsa.validate();

  if (doc.contains("importance")) {
    const Json& i = object_at(doc, "importance", top);
    reject_unknown_keys(i, {"metrics"}, "config.importance");
    for (const auto& m : get<std::vector<std::string>>(i, "metrics", {}, "config.importance")) {
      c.report_metrics.push_back(parse_metric(m));
    }
    for (auto m : c.report_metrics)
      if (m == Metric::qm_taylor && declared_classes(c) == 1) throw ConfigError(qm_remedy);
  }

  if (doc.contains("memory")) {
    const std::string where = "config.memory";
    const Json& m = object_at(doc, "memory", top);
    reject_unknown_keys(m, {"batch_size", "freeze_all", "name", "compare"}, where);
    c.memory.batch_size = get<std::size_t>(m, "batch_size", c.memory.batch_size, where);
    if (c.memory.batch_size == 0) throw ConfigError(where + ": batch_size must be positive");
    c.memory.freeze_all = get<bool>(m, "freeze_all", false, where);
    c.memory.name = get<std::string>(m, "name", c.memory.name, where);
    if (m.contains("compare")) {
      const Json& b = object_at(m, "compare", where);
      reject_unknown_keys(b, {"name", "method", "metric", "rank", "ratio", "layers", "train_head", "adapt_norms",
                              "aggregation", "lora"},
                          where + ".compare");
      SelectionSpec spec = c.selection;
      parse_selection(b, spec, where + ".compare");
      check_selection_shape(spec, where + ".compare");
      c.memory.compare = spec;
      c.memory.compare_name = get<std::string>(b, "name", c.memory.compare_name, where + ".compare");
    }
  }

  if (doc.contains("spsa_study")) {
    const std::string where = "config.spsa_study";
    const Json& s = object_at(doc, "spsa_study", top);
    reject_unknown_keys(s, {"gradient", "n", "k", "epsilon", "single_samples", "replications", "gaps",
                            "rank_replications", "rank_g_j", "rank_others"},
                        where);
    auto& st = c.spsa_study;
    st.gradient = get<std::vector<double>>(s, "gradient", st.gradient, where);
    st.n = get<std::size_t>(s, "n", st.n, where);
    st.k = get<std::size_t>(s, "k", st.k, where);
    st.epsilon = get<double>(s, "epsilon", st.epsilon, where);
    st.single_samples = get<std::size_t>(s, "single_samples", st.single_samples, where);
    st.replications = get<std::size_t>(s, "replications", st.replications, where);
    st.gaps = get<std::vector<double>>(s, "gaps", st.gaps, where);
    st.rank_replications = get<std::size_t>(s, "rank_replications", st.rank_replications, where);
    st.rank_g_j = get<double>(s, "rank_g_j", st.rank_g_j, where);
    st.rank_others = get<std::vector<double>>(s, "rank_others", st.rank_others, where);
    if (st.gradient.empty()) throw ConfigError(where + ": gradient must not be empty");
    if (st.n == 0 || st.k == 0) throw ConfigError(where + ": n and k must be positive");
    if (!(st.epsilon > 0.0)) throw ConfigError(where + ": epsilon must be positive");
  }

  if (doc.contains("merge")) {
    const std::string where = "config.merge";
    const Json& m = object_at(doc, "merge", top);
    reject_unknown_keys(m, {"model", "adapters"}, where);
    if (m.contains("model")) c.merge_model = resolve(base_dir, get<std::string>(m, "model", "", where));
    if (m.contains("adapters")) c.merge_adapters = resolve(base_dir, get<std::string>(m, "adapters", "", where));
  }
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  const Json doc = read_json_file(path);
  return parse_experiment_config(doc, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

void override_seed(ExperimentConfig& config, std::uint64_t seed) { config.seed = seed; }

Model build_model(const ExperimentConfig& config) {
  const Json& m = config.model_doc;
  const std::string where = "config.model";
  Model model;
  if (m.contains("mlp")) {
    const Json& j = m.at("mlp");
    MlpShape shape{get<std::size_t>(j, "input_dim", 32, where), get<std::vector<std::size_t>>(j, "hidden", {128, 64}, where),
                   get<std::size_t>(j, "num_classes", 3, where)};
    model = make_mlp(shape, config.seed);
  } else if (m.contains("transformer")) {
    const Json& j = m.at("transformer");
    TransformerShape shape;
    shape.seq_len = get<std::size_t>(j, "seq_len", shape.seq_len, where);
    shape.token_dim = get<std::size_t>(j, "token_dim", shape.token_dim, where);
    shape.d_model = get<std::size_t>(j, "d_model", shape.d_model, where);
    shape.mlp_hidden = get<std::size_t>(j, "mlp_hidden", shape.mlp_hidden, where);
    shape.num_classes = get<std::size_t>(j, "num_classes", shape.num_classes, where);
    model = make_transformer(shape, config.seed);
  } else if (m.contains("path")) {
    model = model_from_json(read_json_file(m.at("path").get<std::string>()));
  } else {
    model = model_from_json(m.at("inline"));
  }
  if (m.contains("zero_input_columns")) {
    model.zero_input_columns = get<std::vector<std::size_t>>(m, "zero_input_columns", {}, where);
    initialize(model);
  }
  model.validate();
  if (config.selection.metric == Metric::qm_taylor && model.num_classes < 2) throw ConfigError(qm_remedy);
  return model;
}

SynthTask build_task(const ExperimentConfig& config, const Model& model) {
  SynthTaskSpec spec = config.task;
  if (!config.task_input_dim_set) spec.input_dim = model.input_dim;
  if (!config.task_classes_set) spec.classes = model.num_classes;
  if (spec.input_dim != model.input_dim) {
    throw ConfigError("task input_dim " + std::to_string(spec.input_dim) + " differs from the model's " +
                      std::to_string(model.input_dim));
  }
  if (spec.classes != model.num_classes) {
    throw ConfigError("task classes " + std::to_string(spec.classes) + " differ from the model's " +
                      std::to_string(model.num_classes));
  }
  spec.seed = config.seed;
  return make_synth_task(spec);
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out + '\n';
}

SelectionSpec seeded(SelectionSpec spec, std::uint64_t seed) {
  spec.seed = seed;
  return spec;
}

SpsaConfig seeded_spsa(const SelectionSpec& spec) {
  SpsaConfig s = spec.spsa;
  s.base_seed = substream(spec.seed, "spsa");
  return s;
}

Json summary_json(const FiveNumberSummary& s) {
  return {{"mean", s.mean}, {"min", s.min}, {"q1", s.q1}, {"median", s.median}, {"q3", s.q3}, {"max", s.max}};
}

Json selection_json(const SelectionSpec& s) {
  Json j;
  j["method"] = to_string(s.method);
  j["metric"] = to_string(s.metric);
  if (s.rank) j["rank"] = *s.rank;
  if (s.ratio) j["ratio"] = *s.ratio;
  j["train_head"] = s.train_head;
  return j;
}

void ensure_dir(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory '" + out.string() + "': " + ec.message());
}

std::size_t trainable_count(const Model& model, const TrainTarget& target) {
  std::size_t n = trainable_parameter_count(target.adapters);
  for (const auto& name : target.trainable_base) n += model.parameter(name).size();
  return n;
}

}  // namespace

void cmd_importance(const ExperimentConfig& config, const fs::path& out) {
  const Model model = build_model(config);
  const SynthTask task = build_task(config, model);
  SelectionSpec spec = seeded(config.selection, config.seed);
  spec.method = Method::sprufft;
  if (!spec.rank && !spec.ratio) throw ConfigError("importance: give a rank or a ratio to mark selected rows");
  spec.validate(model);
  const auto layers = resolve_layers(model, spec);
  const auto counts = rows_per_layer(model, spec);

  std::vector<Metric> metrics{spec.metric};
  for (auto m : config.report_metrics)
    if (std::find(metrics.begin(), metrics.end(), m) == metrics.end()) metrics.push_back(m);

  std::vector<ImportanceEngine> engines;
  engines.reserve(metrics.size());
  for (auto m : metrics) {
    if (m == Metric::qm_taylor && model.num_classes < 2) throw ConfigError(qm_remedy);
    engines.emplace_back(model, task.train, m, layers, seeded_spsa(spec), substream(spec.seed, "random"));
  }

  std::vector<std::string> header{"layer", "neuron"};
  for (auto m : metrics) header.push_back(to_string(m));
  header.push_back("selected");
  std::string csv = join(header);
  Json report;
  report["seed"] = config.seed;
  report["selection_metric"] = to_string(spec.metric);
  if (spec.rank) report["rank"] = *spec.rank;
  if (spec.ratio) report["ratio"] = *spec.ratio;
  Json layer_list = Json::array();
  for (const auto& l : layers) {
    std::vector<std::vector<double>> scores;
    for (const auto& e : engines) scores.push_back(e.scores(l));
    const RowSelection sel = select_top_r(scores.front(), counts.at(l));
    std::vector<bool> chosen(scores.front().size(), false);
    for (auto i : sel.indices()) chosen[i] = true;
    for (std::size_t r = 0; r < chosen.size(); ++r) {
      std::vector<std::string> row{l, std::to_string(r)};
      for (const auto& s : scores) row.push_back(num(s[r]));
      row.push_back(chosen[r] ? "1" : "0");
      csv += join(row);
    }
    Json lj;
    lj["layer"] = l;
    lj["d_out"] = chosen.size();
    lj["rows"] = counts.at(l);
    lj["selected"] = sel.indices();
    Json sj;
    for (std::size_t i = 0; i < metrics.size(); ++i) sj[to_string(metrics[i])] = scores[i];
    lj["scores"] = std::move(sj);
    for (std::size_t i = 0; i < metrics.size(); ++i) {
      if (metrics[i] != Metric::qm_taylor) continue;
      const auto cs = engines[i].class_scores(l);
      Json rows = Json::array();
      for (std::size_t r = 0; r < cs.scores.rows(); ++r) {
        std::vector<double> v(cs.scores.data().begin() + r * cs.classes(),
                              cs.scores.data().begin() + (r + 1) * cs.classes());
        rows.push_back(std::move(v));
      }
      lj["class_scores"] = std::move(rows);
    }
    layer_list.push_back(std::move(lj));
  }
  report["layers"] = std::move(layer_list);
  ensure_dir(out);
  write_text_file(out / "importance.csv", csv);
  write_json_file(out / "importance.json", report);
}

void cmd_train(const ExperimentConfig& config, const fs::path& out) {
  Model model = build_model(config);
  const SynthTask task = build_task(config, model);
  const SelectionSpec spec = seeded(config.selection, config.seed);
  PreparedTarget prepared = prepare_target(model, task.train, spec);
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  ensure_dir(out);
  const TrainHistory history = train(model, prepared.target, task.train, task.val, tc);

  std::string csv = join({"epoch", "split", "loss", "accuracy", "class_mean", "class_min", "class_q1", "class_median",
                          "class_q3", "class_max"});
  Json epochs = Json::array();
  for (const auto& e : history.epochs) {
    auto line = [&](const char* split, double loss, double acc, const FiveNumberSummary& s) {
      csv += join({std::to_string(e.epoch), split, num(loss), num(acc), num(s.mean), num(s.min), num(s.q1),
                   num(s.median), num(s.q3), num(s.max)});
    };
    line("train", e.train_loss, e.train_accuracy, e.train_per_class);
    line("val", e.val_loss, e.val_accuracy, e.val_per_class);
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"train_per_class", summary_json(e.train_per_class)},
                      {"val_loss", e.val_loss},
                      {"val_accuracy", e.val_accuracy},
                      {"val_per_class", summary_json(e.val_per_class)}});
  }
  Json metrics;
  metrics["seed"] = config.seed;
  metrics["selection"] = selection_json(spec);
  metrics["trainable_parameters"] = trainable_count(model, prepared.target);
  metrics["model_parameters"] = model.parameter_count();
  metrics["train"] = {{"learning_rate", tc.learning_rate}, {"schedule", schedule_name(tc.schedule)},
                      {"epochs", tc.epochs}, {"batch_size", tc.batch_size}};
  Json sel;
  for (const auto& r : prepared.target.adapters.rows) sel[r.target] = r.selection.indices();
  metrics["selected_rows"] = std::move(sel);
  metrics["step_losses"] = history.step_losses;
  metrics["epochs"] = std::move(epochs);

  write_text_file(out / "metrics.csv", csv);
  write_json_file(out / "metrics.json", metrics);
  Json checkpoint = adapters_to_json(prepared.target.adapters);
  attach_base_parameters(checkpoint, model, prepared.target.trainable_base);
  write_json_file(out / "adapter.json", checkpoint);
  if (config.write_merged_model) write_json_file(out / "model.json", model_to_json(merge(model, prepared.target.adapters)));
}

void cmd_spsa_study(const ExperimentConfig& config, const fs::path& out) {
  const auto& st = config.spsa_study;
  const std::uint64_t key = substream(config.seed, "spsa");
  const MomentStudy single = spsa_moment_study(st.gradient, 1, 1, st.single_samples, st.epsilon, substream(key, "single"));
  const MomentStudy averaged = spsa_moment_study(st.gradient, st.n, st.k, st.replications, st.epsilon,
                                                 substream(key, "averaged"));
  std::vector<RankRow> ranks;
  for (std::size_t i = 0; i < st.gaps.size(); ++i) {
    ranks.push_back(spsa_rank_point(st.gaps[i], st.rank_g_j, st.rank_others, st.n, st.k, st.rank_replications,
                                    st.epsilon, combine_keys(substream(key, "rank"), i)));
  }

  std::string csv = join({"setting", "n", "k", "samples", "coordinate", "g", "mean", "std_error", "z_score", "variance",
                          "law_variance", "variance_ratio"});
  Json moments = Json::array();
  for (const auto* study : {&single, &averaged}) {
    const std::string setting = study == &single ? "single" : "averaged";
    Json rows = Json::array();
    for (const auto& r : study->rows) {
      csv += join({setting, std::to_string(study->n), std::to_string(study->k), std::to_string(study->samples),
                   std::to_string(r.coordinate), num(r.g), num(r.mean), num(r.std_error), num(r.z_score()),
                   num(r.variance), num(r.law_variance), num(r.ratio())});
      rows.push_back({{"coordinate", r.coordinate}, {"g", r.g}, {"mean", r.mean}, {"std_error", r.std_error},
                      {"variance", r.variance}, {"law_variance", r.law_variance}, {"variance_ratio", r.ratio()}});
    }
    moments.push_back({{"setting", setting}, {"n", study->n}, {"k", study->k}, {"samples", study->samples},
                       {"rows", std::move(rows)}});
  }
  std::string rank_csv =
      join({"gap", "g_i", "g_j", "replications", "empirical", "predicted", "predicted_exact_variance"});
  Json rank_json = Json::array();
  for (const auto& r : ranks) {
    rank_csv += join({num(r.gap), num(r.g_i), num(r.g_j), std::to_string(r.replications), num(r.empirical),
                      num(r.predicted), num(r.predicted_exact)});
    rank_json.push_back({{"gap", r.gap}, {"g_i", r.g_i}, {"g_j", r.g_j}, {"replications", r.replications},
                         {"empirical", r.empirical}, {"predicted", r.predicted},
                         {"predicted_exact_variance", r.predicted_exact}});
  }
  ensure_dir(out);
  write_text_file(out / "spsa_diagnostics.csv", csv);
  write_text_file(out / "spsa_rank.csv", rank_csv);
  write_json_file(out / "spsa_study.json", Json{{"seed", config.seed},
                                                {"epsilon", st.epsilon},
                                                {"moments", std::move(moments)},
                                                {"rank", std::move(rank_json)}});
}

namespace {

Json components_json(const MemoryComponents& m) {
  return {{"layer", m.layer},
          {"trainable_params", m.trainable_params},
          {"mem_model", m.mem_model},
          {"mem_ft", m.mem_ft},
          {"mem_opt", m.mem_opt},
          {"aux_dropout", m.aux_dropout},
          {"other", m.other()},
          {"mem_aux", m.mem_aux()},
          {"total", m.total()}};
}

Json report_json(const std::string& name, const MemoryReport& r) {
  Json layers = Json::array();
  for (const auto& l : r.layers) layers.push_back(components_json(l));
  Json ledger = Json::array();
  for (const auto& e : r.ledger) {
    ledger.push_back({{"label", e.label},
                      {"scope", e.scope},
                      {"elements", e.element_count},
                      {"kind", e.kind == CacheKind::dropout_mask ? "dropout_mask" : "activation"},
                      {"reason", e.reason}});
  }
  return {{"name", name}, {"layers", std::move(layers)}, {"totals", components_json(r.totals)},
          {"ledger", std::move(ledger)}};
}

TrainingSetup setup_for(const Model& model, const SynthTask& task, const SelectionSpec& spec, bool freeze,
                        const std::string& name) {
  if (freeze) return {name, {}, {}, true};
  PreparedTarget p = prepare_target(model, task.train, spec);
  return {name, std::move(p.target.adapters), std::move(p.target.trainable_base), true};
}

}  // namespace

void cmd_memory_report(const ExperimentConfig& config, const fs::path& out) {
  const Model model = build_model(config);
  const SynthTask task = build_task(config, model);
  const auto& mc = config.memory;
  if (mc.batch_size > task.train.size()) throw ConfigError("memory: batch_size exceeds the training set");
  std::vector<std::size_t> rows(mc.batch_size);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const LabeledBatch batch = task.train.subset(rows);
  const std::uint64_t dropout_key = substream(config.seed, "dropout");

  const TrainingSetup a = setup_for(model, task, seeded(config.selection, config.seed), mc.freeze_all, mc.name);
  const MemoryReport ra = measure_training_footprint(model, a, batch, dropout_key);
  Json doc;
  doc["seed"] = config.seed;
  doc["batch_size"] = mc.batch_size;
  doc["unit"] = "elements";
  doc["configurations"] = Json::array({report_json(a.name, ra)});
  std::string text = a.name + "\n" + format_memory_table(ra);
  if (mc.compare) {
    const TrainingSetup b = setup_for(model, task, seeded(*mc.compare, config.seed), false, mc.compare_name);
    const MemoryReport rb = measure_training_footprint(model, b, batch, dropout_key);
    doc["configurations"].push_back(report_json(b.name, rb));
    const CacheComparison cmp = compare_configurations(model, a, b, batch, dropout_key);
    Json layers = Json::array();
    for (const auto& l : cmp.layers) {
      layers.push_back({{"layer", l.layer}, {"mem_aux_a", l.a.mem_aux()}, {"mem_aux_b", l.b.mem_aux()},
                        {"delta", l.aux_delta()}});
    }
    doc["comparison"] = {{"a", cmp.name_a}, {"b", cmp.name_b}, {"layers", std::move(layers)},
                         {"total_delta", cmp.aux_delta()}, {"summary", cmp.summary()}};
    text += "\n" + b.name + "\n" + format_memory_table(rb) + "\n" + format_comparison_table(cmp);
  }
  ensure_dir(out);
  write_json_file(out / "memory.json", doc);
  write_text_file(out / "memory.txt", text);
}

void cmd_merge(const ExperimentConfig& config, const fs::path& out) {
  if (config.merge_adapters.empty()) throw ConfigError("merge: config.merge.adapters is required");
  Model model = config.merge_model.empty() ? build_model(config) : model_from_json(read_json_file(config.merge_model));
  const Json checkpoint = read_json_file(config.merge_adapters);
  const AdapterSet adapters = adapters_from_json(checkpoint, model);
  apply_base_parameters(checkpoint, model);
  ensure_dir(out);
  write_json_file(out / "model.json", model_to_json(merge(model, adapters)));
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"spruft: row-selective sparse fine-tuning experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<long long> seed;
  std::string out_dir;
  struct Command {
    const char* name;
    const char* help;
    void (*run)(const ExperimentConfig&, const fs::path&);
  };
  const Command commands[] = {
      {"importance", "score neurons and write importance.csv / importance.json", cmd_importance},
      {"train", "select rows, train adapters, write metrics and checkpoints", cmd_train},
      {"spsa-study", "SPSA moment and rank-probability diagnostics", cmd_spsa_study},
      {"memory-report", "analytic training-memory tables", cmd_memory_report},
      {"merge", "fold an adapter checkpoint into its base model", cmd_merge},
  };
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", out_dir, "output directory (overrides config.out)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_config;
  }
  try {
    ExperimentConfig config = load_experiment_config(config_path);
    if (seed) {
      if (*seed < 0) throw ConfigError("--seed must be nonnegative");
      override_seed(config, static_cast<std::uint64_t>(*seed));
    }
    const fs::path out = out_dir.empty() ? config.out : fs::path(out_dir);
    for (const auto& c : commands) {
      if (app.got_subcommand(c.name)) c.run(config, out);
    }
    return exit_ok;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return exit_config;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return exit_config;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return exit_config;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return exit_divergence;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return exit_io;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_other;
  }
}

}  // namespace spruft
