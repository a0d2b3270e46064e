#include "spruft/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "spruft/errors.hpp"

namespace spruft {

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

double gelu_value(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

double gelu_slope(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

Tape::Scope::Scope(Tape& tape, std::string name) : tape_(tape) { tape_.scopes_.push_back(std::move(name)); }

Tape::Scope::~Scope() { tape_.scopes_.pop_back(); }

std::string Tape::current_scope() const { return scopes_.empty() ? std::string{} : scopes_.back(); }

std::string Tape::default_label(const char* op) const {
  std::string scope = current_scope();
  return (scope.empty() ? std::string{} : scope + ".") + op + "#" + std::to_string(nodes_.size());
}

bool Tape::is_parameter(NodeId id) const {
  const auto& role = nodes_.at(id).role;
  return role && *role != LeafRole::input;
}

void Tape::retain(NodeId id, const std::string& reason) {
  if (is_parameter(id)) return;
  if (auto it = retained_.find(id); it != retained_.end()) {
    auto& entry = ledger_[it->second];
    if (entry.reason.find(reason) == std::string::npos) entry.reason += "; " + reason;
    return;
  }
  retained_.emplace(id, ledger_.size());
  ledger_.push_back({nodes_[id].label, nodes_[id].value.size(), reason, CacheKind::activation, current_scope()});
}

void Tape::retain_private(std::string label, std::size_t count, std::string reason, CacheKind kind) {
  ledger_.push_back({std::move(label), count, std::move(reason), kind, current_scope()});
}

std::size_t Tape::cache_total() const {
  std::size_t total = 0;
  for (const auto& e : ledger_) total += e.element_count;
  return total;
}

std::size_t Tape::cache_total(CacheKind kind) const {
  std::size_t total = 0;
  for (const auto& e : ledger_)
    if (e.kind == kind) total += e.element_count;
  return total;
}

void Tape::accumulate(const Tape& tape, GradSlots& grads, NodeId id, Tensor g) {
  if (!tape.requires_grad(id)) return;
  auto& slot = grads[id];
  if (slot) {
    *slot += g;
  } else {
    slot = std::move(g);
  }
}

NodeId Tape::push(Tensor value, std::vector<NodeId> inputs, std::string label, BackwardFn backward) {
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw std::logic_error("tape: input node " + std::to_string(in) + " does not exist");
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](NodeId in) { return nodes_[in].requires_grad; });
  node.inputs = std::move(inputs);
  node.label = std::move(label);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

NodeId Tape::leaf(Tensor value, LeafRole role, std::string label) {
  Node node;
  node.value = std::move(value);
  node.role = role;
  node.requires_grad = role == LeafRole::trainable;
  node.label = label.empty() ? default_label("leaf") : std::move(label);
  nodes_.push_back(std::move(node));
  const NodeId id = nodes_.size() - 1;
  if (role == LeafRole::trainable) trainable_.push_back(id);
  return id;
}

NodeId Tape::matmul(NodeId a, NodeId b, std::string label) {
  Tensor out = spruft::matmul(value(a), value(b));
  if (requires_grad(b)) retain(a, "d/d " + nodes_[b].label);
  if (requires_grad(a)) retain(b, "d/d " + nodes_[a].label);
  return push(std::move(out), {a, b}, label.empty() ? default_label("matmul") : std::move(label),
              [a, b](const Tape& t, const Tensor& g, GradSlots& grads) {
                if (t.requires_grad(a)) accumulate(t, grads, a, spruft::matmul_nt(g, t.value(b)));
                if (t.requires_grad(b)) accumulate(t, grads, b, matmul_tn(t.value(a), g));
              });
}

NodeId Tape::matmul_nt(NodeId a, NodeId b, std::string label) {
  Tensor out = spruft::matmul_nt(value(a), value(b));
  if (requires_grad(b)) retain(a, "d/d " + nodes_[b].label);
  if (requires_grad(a)) retain(b, "d/d " + nodes_[a].label);
  return push(std::move(out), {a, b}, label.empty() ? default_label("matmul_nt") : std::move(label),
              [a, b](const Tape& t, const Tensor& g, GradSlots& grads) {
                if (t.requires_grad(a)) accumulate(t, grads, a, spruft::matmul(g, t.value(b)));
                if (t.requires_grad(b)) accumulate(t, grads, b, matmul_tn(g, t.value(a)));
              });
}

NodeId Tape::add(NodeId a, NodeId b, std::string label) {
  Tensor out = value(a) + value(b);
  return push(std::move(out), {a, b}, label.empty() ? default_label("add") : std::move(label),
              [a, b](const Tape& t, const Tensor& g, GradSlots& grads) {
                accumulate(t, grads, a, g);
                accumulate(t, grads, b, g);
              });
}

NodeId Tape::add_row_vector(NodeId x, NodeId v, std::string label) {
  const Tensor& xv = value(x);
  const Tensor& vv = value(v);
  require_matrix(xv, "add_row_vector");
  if (vv.size() != xv.cols()) {
    throw DimensionError("add_row_vector: " + shape_string(vv.shape()) + " does not match rows of " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += vv[j];
  return push(std::move(out), {x, v}, label.empty() ? default_label("add_bias") : std::move(label),
              [x, v](const Tape& t, const Tensor& g, GradSlots& grads) {
                accumulate(t, grads, x, g);
                if (t.requires_grad(v)) {
                  Tensor gv(t.value(v).shape());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) gv[j] += g(i, j);
                  accumulate(t, grads, v, std::move(gv));
                }
              });
}

NodeId Tape::scale(NodeId x, double factor, std::string label) {
  Tensor out = factor * value(x);
  return push(std::move(out), {x}, label.empty() ? default_label("scale") : std::move(label),
              [x, factor](const Tape& t, const Tensor& g, GradSlots& grads) { accumulate(t, grads, x, factor * g); });
}

NodeId Tape::relu(NodeId x, std::string label) {
  Tensor out = value(x);
  for (auto& e : out.data()) e = std::max(e, 0.0);
  const NodeId id = push(std::move(out), {x}, label.empty() ? default_label("relu") : std::move(label), {});
  if (requires_grad(x)) retain(id, "d/d " + nodes_[x].label + " (relu)");
  nodes_[id].backward = [x, id](const Tape& t, const Tensor& g, GradSlots& grads) {
    const Tensor& y = t.value(id);
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (y[i] <= 0.0) gx[i] = 0.0;
    accumulate(t, grads, x, std::move(gx));
  };
  return id;
}

NodeId Tape::gelu(NodeId x, std::string label) {
  Tensor out = value(x);
  for (auto& e : out.data()) e = gelu_value(e);
  if (requires_grad(x)) retain(x, "d/d " + nodes_[x].label + " (gelu)");
  return push(std::move(out), {x}, label.empty() ? default_label("gelu") : std::move(label),
              [x](const Tape& t, const Tensor& g, GradSlots& grads) {
                const Tensor& xv = t.value(x);
                Tensor gx = g;
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= gelu_slope(xv[i]);
                accumulate(t, grads, x, std::move(gx));
              });
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId shift, double eps, std::string label) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gain);
  const Tensor& sv = value(shift);
  require_matrix(xv, "layer_norm");
  const std::size_t m = xv.rows(), d = xv.cols();
  if (gv.size() != d || sv.size() != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gv.shape()) + " / shift " + shape_string(sv.shape()) +
                         " do not match " + shape_string(xv.shape()));
  }
  Tensor xhat({m, d});
  std::vector<double> rstd(m);
  Tensor out({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xv(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (xv(i, j) - mean) * rstd[i];
      out(i, j) = xhat(i, j) * gv[j] + sv[j];
    }
  }
  std::string name = label.empty() ? default_label("layer_norm") : std::move(label);
  if (requires_grad(x) || requires_grad(gain)) retain_private(name + ".normalized", m * d, "d/d layer_norm input/gain", CacheKind::activation);
  if (requires_grad(x)) {
    retain_private(name + ".rstd", m, "d/d " + nodes_[x].label, CacheKind::activation);
    retain(gain, "d/d " + nodes_[x].label);
  }
  return push(std::move(out), {x, gain, shift}, std::move(name),
              [x, gain, shift, xhat = std::move(xhat), rstd = std::move(rstd)](const Tape& t, const Tensor& g,
                                                                              GradSlots& grads) {
                const std::size_t m = g.rows(), d = g.cols();
                if (t.requires_grad(gain)) {
                  Tensor gg(t.value(gain).shape());
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g(i, j) * xhat(i, j);
                  accumulate(t, grads, gain, std::move(gg));
                }
                if (t.requires_grad(shift)) {
                  Tensor gs(t.value(shift).shape());
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) gs[j] += g(i, j);
                  accumulate(t, grads, shift, std::move(gs));
                }
                if (t.requires_grad(x)) {
                  const Tensor& gv = t.value(gain);
                  Tensor gx({m, d});
                  for (std::size_t i = 0; i < m; ++i) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dxhat = g(i, j) * gv[j];
                      mean_dxhat += dxhat;
                      mean_dxhat_xhat += dxhat * xhat(i, j);
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dxhat = g(i, j) * gv[j];
                      gx(i, j) = rstd[i] * (dxhat - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
                    }
                  }
                  accumulate(t, grads, x, std::move(gx));
                }
              });
}

NodeId Tape::scatter_columns(NodeId u, std::span<const std::size_t> columns, std::size_t width, std::string label) {
  const Tensor& uv = value(u);
  require_matrix(uv, "scatter_columns");
  if (uv.cols() != columns.size()) {
    throw DimensionError("scatter_columns: " + shape_string(uv.shape()) + " has " + std::to_string(uv.cols()) +
                         " columns for " + std::to_string(columns.size()) + " positions");
  }
  Tensor out({uv.rows(), width});
  for (std::size_t i = 0; i < uv.rows(); ++i)
    for (std::size_t j = 0; j < columns.size(); ++j) {
      if (columns[j] >= width) throw ContractError("scatter_columns: position out of range");
      out(i, columns[j]) += uv(i, j);
    }
  return push(std::move(out), {u}, label.empty() ? default_label("scatter_columns") : std::move(label),
              [u, cols = std::vector<std::size_t>(columns.begin(), columns.end())](const Tape& t, const Tensor& g,
                                                                                   GradSlots& grads) {
                Tensor gu({g.rows(), cols.size()});
                for (std::size_t i = 0; i < g.rows(); ++i)
                  for (std::size_t j = 0; j < cols.size(); ++j) gu(i, j) = g(i, cols[j]);
                accumulate(t, grads, u, std::move(gu));
              });
}

NodeId Tape::gather_columns(NodeId x, std::span<const std::size_t> columns, std::string label) {
  const Tensor& xv = value(x);
  require_matrix(xv, "gather_columns");
  Tensor out({xv.rows(), columns.size()});
  for (std::size_t j = 0; j < columns.size(); ++j) {
    if (columns[j] >= xv.cols()) throw ContractError("gather_columns: column out of range");
    for (std::size_t i = 0; i < xv.rows(); ++i) out(i, j) = xv(i, columns[j]);
  }
  return push(std::move(out), {x}, label.empty() ? default_label("gather_columns") : std::move(label),
              [x, cols = std::vector<std::size_t>(columns.begin(), columns.end())](const Tape& t, const Tensor& g,
                                                                                   GradSlots& grads) {
                Tensor gx(t.value(x).shape());
                for (std::size_t i = 0; i < g.rows(); ++i)
                  for (std::size_t j = 0; j < cols.size(); ++j) gx(i, cols[j]) += g(i, j);
                accumulate(t, grads, x, std::move(gx));
              });
}

NodeId Tape::scatter_vector(NodeId delta, std::span<const std::size_t> positions, std::size_t length,
                            std::string label) {
  const Tensor& dv = value(delta);
  if (dv.size() != positions.size()) throw DimensionError("scatter_vector: value count differs from position count");
  Tensor out({length});
  for (std::size_t j = 0; j < positions.size(); ++j) {
    if (positions[j] >= length) throw ContractError("scatter_vector: position out of range");
    out[positions[j]] += dv[j];
  }
  return push(std::move(out), {delta}, label.empty() ? default_label("scatter_vector") : std::move(label),
              [delta, pos = std::vector<std::size_t>(positions.begin(), positions.end())](
                  const Tape& t, const Tensor& g, GradSlots& grads) {
                Tensor gd(t.value(delta).shape());
                for (std::size_t j = 0; j < pos.size(); ++j) gd[j] = g[pos[j]];
                accumulate(t, grads, delta, std::move(gd));
              });
}

NodeId Tape::dropout_matmul_nt(NodeId x, Tensor mask, NodeId weight, std::string label) {
  const Tensor& xv = value(x);
  if (mask.shape() != xv.shape()) {
    throw DimensionError("dropout mask " + shape_string(mask.shape()) + " does not match input " +
                         shape_string(xv.shape()));
  }
  Tensor dropped = xv;
  for (std::size_t i = 0; i < dropped.size(); ++i) dropped[i] *= mask[i];
  Tensor out = spruft::matmul_nt(dropped, value(weight));
  std::string name = label.empty() ? default_label("dropout_matmul") : std::move(label);
  if (requires_grad(weight) || requires_grad(x)) {
    retain_private(name + ".mask", mask.size(), "dropout mask", CacheKind::dropout_mask);
  }
  if (requires_grad(weight)) retain(x, "d/d " + nodes_[weight].label);
  if (requires_grad(x)) retain(weight, "d/d " + nodes_[x].label);
  return push(std::move(out), {x, weight}, std::move(name),
              [x, weight, mask = std::move(mask)](const Tape& t, const Tensor& g, GradSlots& grads) {
                if (t.requires_grad(weight)) {
                  Tensor dropped = t.value(x);
                  for (std::size_t i = 0; i < dropped.size(); ++i) dropped[i] *= mask[i];
                  accumulate(t, grads, weight, matmul_tn(g, dropped));
                }
                if (t.requires_grad(x)) {
                  Tensor gx = spruft::matmul(g, t.value(weight));
                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= mask[i];
                  accumulate(t, grads, x, std::move(gx));
                }
              });
}

NodeId Tape::attention(NodeId q, NodeId k, NodeId v, std::size_t tokens, std::string label) {
  const Tensor& qv = value(q);
  const Tensor& kv = value(k);
  const Tensor& vv = value(v);
  require_matrix(qv, "attention");
  if (kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
    throw DimensionError("attention: q/k/v shapes differ: " + shape_string(qv.shape()) + ", " +
                         shape_string(kv.shape()) + ", " + shape_string(vv.shape()));
  }
  if (tokens == 0 || qv.rows() % tokens != 0) {
    throw DimensionError("attention: " + std::to_string(qv.rows()) + " rows are not a multiple of " +
                         std::to_string(tokens) + " tokens");
  }
  const std::size_t groups = qv.rows() / tokens, d = qv.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor probs({groups * tokens, tokens});
  Tensor out({qv.rows(), d});
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * tokens;
    for (std::size_t a = 0; a < tokens; ++a) {
      double mx = -INFINITY;
      std::vector<double> s(tokens);
      for (std::size_t b = 0; b < tokens; ++b) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += qv(base + a, c) * kv(base + b, c);
        s[b] = acc * inv_sqrt_d;
        mx = std::max(mx, s[b]);
      }
      double z = 0.0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t b = 0; b < tokens; ++b) {
        const double p = s[b] / z;
        probs(base + a, b) = p;
        for (std::size_t c = 0; c < d; ++c) out(base + a, c) += p * vv(base + b, c);
      }
    }
  }
  std::string name = label.empty() ? default_label("attention") : std::move(label);
  if (requires_grad(q) || requires_grad(k) || requires_grad(v)) {
    retain_private(name + ".probs", probs.size(), "d/d attention inputs", CacheKind::activation);
  }
  if (requires_grad(q)) retain(k, "d/d " + nodes_[q].label);
  if (requires_grad(k)) retain(q, "d/d " + nodes_[k].label);
  if (requires_grad(q) || requires_grad(k)) retain(v, "d/d attention scores");
  return push(std::move(out), {q, k, v}, std::move(name),
              [q, k, v, tokens, inv_sqrt_d, probs = std::move(probs)](const Tape& t, const Tensor& g,
                                                                       GradSlots& grads) {
                const Tensor& qv = t.value(q);
                const Tensor& kv = t.value(k);
                const Tensor& vv = t.value(v);
                const std::size_t groups = qv.rows() / tokens, d = qv.cols();
                const bool need_scores = t.requires_grad(q) || t.requires_grad(k);
                Tensor gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
                for (std::size_t gi = 0; gi < groups; ++gi) {
                  const std::size_t base = gi * tokens;
                  for (std::size_t a = 0; a < tokens; ++a) {
                    if (t.requires_grad(v)) {
                      for (std::size_t b = 0; b < tokens; ++b)
                        for (std::size_t c = 0; c < d; ++c) gv(base + b, c) += probs(base + a, b) * g(base + a, c);
                    }
                    if (!need_scores) continue;
                    std::vector<double> dp(tokens);
                    double weighted = 0.0;
                    for (std::size_t b = 0; b < tokens; ++b) {
                      double acc = 0.0;
                      for (std::size_t c = 0; c < d; ++c) acc += g(base + a, c) * vv(base + b, c);
                      dp[b] = acc;
                      weighted += acc * probs(base + a, b);
                    }
                    for (std::size_t b = 0; b < tokens; ++b) {
                      const double ds = probs(base + a, b) * (dp[b] - weighted) * inv_sqrt_d;
                      for (std::size_t c = 0; c < d; ++c) {
                        gq(base + a, c) += ds * kv(base + b, c);
                        gk(base + b, c) += ds * qv(base + a, c);
                      }
                    }
                  }
                }
                accumulate(t, grads, q, std::move(gq));
                accumulate(t, grads, k, std::move(gk));
                accumulate(t, grads, v, std::move(gv));
              });
}

NodeId Tape::reshape(NodeId x, Shape shape, std::string label) {
  Tensor out = value(x).reshaped(std::move(shape));
  return push(std::move(out), {x}, label.empty() ? default_label("reshape") : std::move(label),
              [x](const Tape& t, const Tensor& g, GradSlots& grads) {
                accumulate(t, grads, x, g.reshaped(t.value(x).shape()));
              });
}

NodeId Tape::mean_pool(NodeId x, std::size_t tokens, std::string label) {
  const Tensor& xv = value(x);
  require_matrix(xv, "mean_pool");
  if (tokens == 0 || xv.rows() % tokens != 0) {
    throw DimensionError("mean_pool: " + std::to_string(xv.rows()) + " rows are not a multiple of " +
                         std::to_string(tokens));
  }
  const std::size_t groups = xv.rows() / tokens, d = xv.cols();
  Tensor out({groups, d});
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t c = 0; c < d; ++c) out(i / tokens, c) += xv(i, c) / static_cast<double>(tokens);
  return push(std::move(out), {x}, label.empty() ? default_label("mean_pool") : std::move(label),
              [x, tokens](const Tape& t, const Tensor& g, GradSlots& grads) {
                Tensor gx(t.value(x).shape());
                for (std::size_t i = 0; i < gx.rows(); ++i)
                  for (std::size_t c = 0; c < gx.cols(); ++c) gx(i, c) = g(i / tokens, c) / static_cast<double>(tokens);
                accumulate(t, grads, x, std::move(gx));
              });
}

NodeId Tape::sum(NodeId x, std::string label) {
  Tensor out = Tensor::scalar(spruft::sum(value(x)));
  return push(std::move(out), {x}, label.empty() ? default_label("sum") : std::move(label),
              [x](const Tape& t, const Tensor& g, GradSlots& grads) {
                accumulate(t, grads, x, Tensor(t.value(x).shape(), g[0]));
              });
}

NodeId Tape::softmax_cross_entropy(NodeId logits, std::span<const int> labels, std::string label) {
  const Tensor& z = value(logits);
  require_matrix(z, "softmax_cross_entropy");
  const std::size_t m = z.rows(), p = z.cols();
  if (labels.size() != m) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
  }
  Tensor probs({m, p});
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= p) {
      throw ContractError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(p) + " classes");
    }
    double mx = -INFINITY;
    for (std::size_t j = 0; j < p; ++j) mx = std::max(mx, z(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += std::exp(z(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < p; ++j) probs(i, j) = std::exp(z(i, j) - lse);
    total += lse - z(i, static_cast<std::size_t>(labels[i]));
  }
  std::string name = label.empty() ? default_label("cross_entropy") : std::move(label);
  if (requires_grad(logits)) retain_private(name + ".probs", m * p, "d/d logits", CacheKind::activation);
  return push(Tensor::scalar(total / static_cast<double>(m)), {logits}, std::move(name),
              [logits, probs = std::move(probs), lbl = std::vector<int>(labels.begin(), labels.end())](
                  const Tape& t, const Tensor& g, GradSlots& grads) {
                Tensor gz = probs;
                const double scale = g[0] / static_cast<double>(gz.rows());
                for (std::size_t i = 0; i < gz.rows(); ++i) {
                  gz(i, static_cast<std::size_t>(lbl[i])) -= 1.0;
                  for (std::size_t j = 0; j < gz.cols(); ++j) gz(i, j) *= scale;
                }
                accumulate(t, grads, logits, std::move(gz));
              });
}

Gradients Tape::backward(NodeId loss) const {
  if (loss >= nodes_.size()) throw ContractError("backward: unknown loss node");
  if (nodes_[loss].value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_string(nodes_[loss].value.shape()));
  }
  Gradients result;
  if (trainable_.empty()) return result;
  GradSlots grads(nodes_.size());
  if (nodes_[loss].requires_grad) grads[loss] = Tensor(nodes_[loss].value.shape(), 1.0);
  for (NodeId id = loss + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.requires_grad || !grads[id] || !node.backward) continue;
    for (NodeId in : node.inputs) {
      if (in >= id) throw std::logic_error("tape is not topologically ordered at node " + std::to_string(id));
    }
    node.backward(*this, *grads[id], grads);
  }
  for (NodeId id : trainable_) {
    result.emplace(id, grads[id] ? std::move(*grads[id]) : Tensor(nodes_[id].value.shape()));
  }
  return result;
}

}  // namespace spruft
