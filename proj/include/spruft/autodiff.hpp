#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spruft/tensor.hpp"

namespace spruft {

using NodeId = std::size_t;

enum class LeafRole { input, frozen, trainable };

enum class CacheKind { activation, dropout_mask };

/// One buffer that some backward rule must keep alive until the backward pass.
struct CacheLedgerEntry {
  std::string label;
  std::size_t element_count = 0;
  std::string reason;  // the gradient this buffer serves
  CacheKind kind = CacheKind::activation;
  std::string scope;   // layer that first required it
};

using Gradients = std::map<NodeId, Tensor>;

/// Reverse-mode tape over dense tensors.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order. Every op consults the requires-grad flags of its inputs and enters
/// into the ledger exactly the buffers its backward rule will read. Parameter
/// leaves (frozen or trainable) are never ledger entries: they are resident
/// regardless of training.
///
/// A Tape is single-writer; build and differentiate it from one thread.
class Tape {
 public:
  NodeId leaf(Tensor value, LeafRole role, std::string label = {});
  NodeId input(Tensor value, std::string label = "input") { return leaf(std::move(value), LeafRole::input, std::move(label)); }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const std::string& label(NodeId id) const { return nodes_.at(id).label; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& trainable_leaves() const { return trainable_; }

  // -- ops -----------------------------------------------------------------
  NodeId matmul(NodeId a, NodeId b, std::string label = {});
  /// a · bᵀ; the linear-layer product x·Wᵀ.
  NodeId matmul_nt(NodeId a, NodeId b, std::string label = {});
  NodeId add(NodeId a, NodeId b, std::string label = {});
  /// Adds a length-n vector to every row of an m×n matrix.
  NodeId add_row_vector(NodeId x, NodeId v, std::string label = {});
  NodeId scale(NodeId x, double factor, std::string label = {});
  NodeId relu(NodeId x, std::string label = {});
  /// Exact (erf) GELU.
  NodeId gelu(NodeId x, std::string label = {});
  NodeId layer_norm(NodeId x, NodeId gain, NodeId shift, double eps, std::string label = {});
  /// Places the columns of an m×r input at `columns` of an m×width output.
  NodeId scatter_columns(NodeId u, std::span<const std::size_t> columns, std::size_t width, std::string label = {});
  /// Selects `columns` of an m×n input into an m×r output.
  NodeId gather_columns(NodeId x, std::span<const std::size_t> columns, std::string label = {});
  /// Places an r-vector at `positions` of a zero vector of the given length.
  NodeId scatter_vector(NodeId delta, std::span<const std::size_t> positions, std::size_t length,
                        std::string label = {});
  /// (x ⊙ mask) · Wᵀ with a fixed, pre-scaled dropout mask.
  NodeId dropout_matmul_nt(NodeId x, Tensor mask, NodeId weight, std::string label = {});
  /// Single-head scaled dot-product self-attention over groups of `tokens` rows.
  NodeId attention(NodeId q, NodeId k, NodeId v, std::size_t tokens, std::string label = {});
  NodeId reshape(NodeId x, Shape shape, std::string label = {});
  /// Averages each consecutive group of `tokens` rows.
  NodeId mean_pool(NodeId x, std::size_t tokens, std::string label = {});
  NodeId sum(NodeId x, std::string label = {});
  /// Mean softmax cross-entropy of m×p logits against labels in [0, p).
  NodeId softmax_cross_entropy(NodeId logits, std::span<const int> labels, std::string label = {});

  /// Gradients of a scalar node with respect to every trainable leaf.
  Gradients backward(NodeId loss) const;

  const std::vector<CacheLedgerEntry>& cache_ledger() const { return ledger_; }
  /// Total elements over all ledger entries.
  std::size_t cache_total() const;
  /// Elements in entries of one kind.
  std::size_t cache_total(CacheKind kind) const;

  /// Ledger entries recorded while a Scope is alive are attributed to it.
  class Scope {
   public:
    Scope(Tape& tape, std::string name);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape& tape_;
  };

 private:
  using GradSlots = std::vector<std::optional<Tensor>>;
  using BackwardFn = std::function<void(const Tape& tape, const Tensor& grad_out, GradSlots& grads)>;

  struct Node {
    Tensor value;
    std::vector<NodeId> inputs;
    std::string label;
    std::optional<LeafRole> role;
    bool requires_grad = false;
    BackwardFn backward;
  };

  static void accumulate(const Tape& tape, GradSlots& grads, NodeId id, Tensor g);
  NodeId push(Tensor value, std::vector<NodeId> inputs, std::string label, BackwardFn backward);
  std::string default_label(const char* op) const;
  bool is_parameter(NodeId id) const;
  /// Records that node `id`'s value is read by a backward rule.
  void retain(NodeId id, const std::string& reason);
  /// Records an op-private buffer (mask, normalized input, probabilities).
  void retain_private(std::string label, std::size_t count, std::string reason, CacheKind kind);
  std::string current_scope() const;

  std::vector<Node> nodes_;
  std::vector<NodeId> trainable_;
  std::vector<CacheLedgerEntry> ledger_;
  std::map<NodeId, std::size_t> retained_;
  std::vector<std::string> scopes_;
};

}  // namespace spruft
