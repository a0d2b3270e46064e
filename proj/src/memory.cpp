#include "spruft/memory.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "spruft/errors.hpp"

namespace spruft {

MemoryComponents& MemoryComponents::operator+=(const MemoryComponents& o) {
  trainable_params += o.trainable_params;
  mem_model += o.mem_model;
  mem_ft += o.mem_ft;
  mem_opt += o.mem_opt;
  aux_activation += o.aux_activation;
  aux_dropout += o.aux_dropout;
  return *this;
}

namespace {

std::string owner_of(const std::string& name) {
  const auto dot = name.rfind('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

class LayerTable {
 public:
  MemoryComponents& at(const std::string& layer) {
    auto it = index_.find(layer);
    if (it == index_.end()) {
      it = index_.emplace(layer, rows_.size()).first;
      rows_.push_back(MemoryComponents{layer});
    }
    return rows_[it->second];
  }
  std::vector<MemoryComponents> take() { return std::move(rows_); }

 private:
  std::map<std::string, std::size_t> index_;
  std::vector<MemoryComponents> rows_;
};

}  // namespace

MemoryReport measure_training_footprint(const Model& model, const TrainingSetup& setup, const LabeledBatch& batch,
                                        std::uint64_t dropout_key) {
  setup.adapters.validate(model);
  for (const auto& name : setup.trainable_base) (void)model.parameter(name);

  LayerTable table;
  for (const auto& name : model.parameter_names()) {
    const std::size_t n = model.parameter(name).size();
    auto& row = table.at(owner_of(name));
    if (setup.trainable_base.contains(name)) {
      row.trainable_params += n;
      row.mem_ft += 2 * n;
      row.mem_opt += 2 * n;
    } else {
      row.mem_model += n;
    }
  }
  for (const auto& [name, n] : adapter_parameter_sizes(setup.adapters)) {
    auto& row = table.at(owner_of(name));
    row.trainable_params += n;
    row.mem_ft += 2 * n;
    row.mem_opt += 2 * n;
  }

  AdaptedPolicy policy(setup.adapters, setup.trainable_base, setup.training, dropout_key);
  const auto traced = model_loss(model, batch, policy);
  MemoryReport report;
  report.ledger = traced.tape.cache_ledger();
  for (const auto& e : report.ledger) {
    auto& row = table.at(e.scope.empty() ? std::string("model") : e.scope);
    (e.kind == CacheKind::dropout_mask ? row.aux_dropout : row.aux_activation) += e.element_count;
  }
  report.layers = table.take();
  report.totals.layer = "total";
  for (const auto& row : report.layers) report.totals += row;
  return report;
}

std::string CacheComparison::summary() const {
  const long long d = aux_delta();
  std::ostringstream os;
  if (d == 0) {
    os << name_a << " and " << name_b << " cache the same number of elements";
  } else {
    const bool a_less = d < 0;
    os << (a_less ? name_a : name_b) << " caches " << (a_less ? -d : d) << " fewer elements than "
       << (a_less ? name_b : name_a);
  }
  return os.str();
}

CacheComparison compare_configurations(const Model& model, const TrainingSetup& a, const TrainingSetup& b,
                                       const LabeledBatch& batch, std::uint64_t dropout_key) {
  const MemoryReport ra = measure_training_footprint(model, a, batch, dropout_key);
  const MemoryReport rb = measure_training_footprint(model, b, batch, dropout_key);
  CacheComparison cmp{a.name, b.name, {}, ra.totals, rb.totals};
  std::map<std::string, std::size_t> index;
  auto row = [&](const std::string& layer) -> LayerDelta& {
    auto it = index.find(layer);
    if (it == index.end()) {
      it = index.emplace(layer, cmp.layers.size()).first;
      cmp.layers.push_back({layer, MemoryComponents{layer}, MemoryComponents{layer}});
    }
    return cmp.layers[it->second];
  };
  for (const auto& l : ra.layers) row(l.layer).a = l;
  for (const auto& l : rb.layers) row(l.layer).b = l;
  return cmp;
}

namespace {

std::string pad(const std::string& s, std::size_t w, bool left) {
  if (s.size() >= w) return s;
  return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

std::string render(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths(rows.front().size(), 0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) widths[c] = std::max(widths[c], r[c].size());
  std::ostringstream os;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      if (c) os << "  ";
      os << pad(rows[i][c], widths[c], c == 0);
    }
    os << '\n';
    if (i == 0 || i + 2 == rows.size()) {
      std::size_t total = 0;
      for (auto w : widths) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  return os.str();
}

std::vector<std::string> cells(const MemoryComponents& m) {
  return {m.layer,
          std::to_string(m.trainable_params),
          std::to_string(m.mem_model),
          std::to_string(m.mem_ft),
          std::to_string(m.mem_opt),
          std::to_string(m.aux_dropout),
          std::to_string(m.other()),
          std::to_string(m.mem_aux()),
          std::to_string(m.total())};
}

}  // namespace

std::string format_memory_table(const MemoryReport& report) {
  std::vector<std::vector<std::string>> rows{
      {"layer", "#param", "mem_model", "mem_ft", "mem_opt", "dropout", "other", "mem_aux", "total"}};
  for (const auto& l : report.layers) rows.push_back(cells(l));
  rows.push_back(cells(report.totals));
  return render(rows);
}

std::string format_comparison_table(const CacheComparison& c) {
  std::vector<std::vector<std::string>> rows{{"layer", "aux(" + c.name_a + ")", "aux(" + c.name_b + ")", "delta",
                                              "#param(" + c.name_a + ")", "#param(" + c.name_b + ")"}};
  for (const auto& l : c.layers) {
    rows.push_back({l.layer, std::to_string(l.a.mem_aux()), std::to_string(l.b.mem_aux()), std::to_string(l.aux_delta()),
                    std::to_string(l.a.trainable_params), std::to_string(l.b.trainable_params)});
  }
  rows.push_back({"total", std::to_string(c.total_a.mem_aux()), std::to_string(c.total_b.mem_aux()),
                  std::to_string(c.aux_delta()), std::to_string(c.total_a.trainable_params),
                  std::to_string(c.total_b.trainable_params)});
  return render(rows) + c.summary() + "\n";
}

}  // namespace spruft
