#pragma once

// Tape-style reverse-mode differentiation.
//
// A Graph is an append-only list of nodes; every node stores its forward value,
// its parents (which always precede it) and a closure computing the
// vector-Jacobian product for its parents. Graphs are rebuilt for every forward
// pass and are confined to one thread.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mirage/core/kernels.hpp"
#include "mirage/core/tensor.hpp"

namespace mirage::ag {

using NodeId = std::size_t;

template <Scalar T>
class Graph;

template <Scalar T>
using GradSlots = std::vector<std::optional<Tensor<T>>>;

template <Scalar T>
struct Var {
  Graph<T>* graph = nullptr;
  NodeId id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t extent(std::size_t axis) const { return value().extent(axis); }
};

// Gradients produced by one backward pass, keyed by node id.
template <Scalar T>
class GradStore {
 public:
  explicit GradStore(GradSlots<T> slots) : slots_(std::move(slots)) {}

  bool has(NodeId id) const { return id < slots_.size() && slots_[id].has_value(); }
  bool has(const Var<T>& v) const { return has(v.id); }

  const Tensor<T>& at(NodeId id) const {
    if (!has(id)) throw LookupError("no gradient recorded for node " + std::to_string(id));
    return *slots_[id];
  }
  const Tensor<T>& at(const Var<T>& v) const { return at(v.id); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.has_value();
    return n;
  }

 private:
  GradSlots<T> slots_;
};

template <Scalar T>
class Graph {
 public:
  // Receives the graph, the node being differentiated and the gradient of
  // the loss with respect to that node's output; adds parent contributions
  // through Graph::accumulate.
  using BackwardFn =
      std::function<void(const Graph&, NodeId self, const Tensor<T>& gout, GradSlots<T>& grads)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value) { return push(std::move(value), {}, nullptr, true, "leaf"); }
  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false, "constant"); }

  // Records an op. The node requires a gradient iff any parent does; nodes
  // that don't keep no backward closure.
  Var<T> record(const char* kind, Tensor<T> value, std::vector<NodeId> parents, BackwardFn fn) {
    bool rg = false;
    for (NodeId p : parents) {
      if (p >= nodes_.size()) throw LookupError("parent node " + std::to_string(p) + " does not exist");
      rg = rg || nodes_[p].requires_grad;
    }
    return push(std::move(value), std::move(parents), rg ? std::move(fn) : nullptr, rg, kind);
  }

  std::size_t size() const { return nodes_.size(); }
  const Tensor<T>& value(NodeId id) const { return node(id).value; }
  const std::vector<NodeId>& parents(NodeId id) const { return node(id).parents; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  const std::string& kind(NodeId id) const { return node(id).kind; }

  Var<T> var(NodeId id) {
    node(id);
    return Var<T>{this, id};
  }

  static void accumulate(const Graph& g, GradSlots<T>& grads, NodeId target, Tensor<T> contribution) {
    if (!g.nodes_[target].requires_grad) return;
    auto& slot = grads[target];
    if (!slot)
      slot = std::move(contribution);
    else
      kern::accumulate(*slot, contribution);
  }

  // Sign pattern of every ReLU input recorded while tracking is enabled.
  // Gradient checks compare signatures at x and x +/- eps to detect that a
  // probe crossed a non-differentiable point.
  void set_track_kinks(bool on) { track_kinks_ = on; }
  void note_kinks(const Tensor<T>& pre) {
    if (!track_kinks_) return;
    for (T v : pre.data()) {
      kink_hash_ ^= static_cast<std::uint64_t>(v > T(0)) + 0x9E3779B97F4A7C15ULL + (kink_hash_ << 6) +
                    (kink_hash_ >> 2);
    }
  }
  std::uint64_t kink_signature() const { return kink_hash_; }

  template <Scalar U>
  friend GradStore<U> backward(const Graph<U>& g, NodeId loss, const Tensor<U>& seed);

 private:
  struct Node {
    Tensor<T> value;
    std::vector<NodeId> parents;
    BackwardFn fn;
    bool requires_grad;
    std::string kind;
  };

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw LookupError("unknown node id " + std::to_string(id));
    return nodes_[id];
  }

  Var<T> push(Tensor<T> value, std::vector<NodeId> parents, BackwardFn fn, bool rg, const char* kind) {
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(fn), rg, kind});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool track_kinks_ = false;
  std::uint64_t kink_hash_ = 0;
};

// Backpropagates `seed` (dL/d node) from `loss`. Only nodes that require a
// gradient and are reachable backward from `loss` appear in the store.
template <Scalar T>
GradStore<T> backward(const Graph<T>& g, NodeId loss, const Tensor<T>& seed) {
  const auto& root = g.node(loss);
  if (seed.shape() != root.value.shape())
    throw DimensionError("backward: seed shape " + shape_str(seed.shape()) + " != node shape " +
                         shape_str(root.value.shape()));
  GradSlots<T> grads(g.size());
  Graph<T>::accumulate(g, grads, loss, seed);
  for (NodeId id = loss + 1; id-- > 0;) {
    if (!grads[id]) continue;
    const auto& n = g.nodes_[id];
    if (n.fn) n.fn(g, id, *grads[id], grads);
  }
  return GradStore<T>(std::move(grads));
}

// Gradient of a scalar node; the seed is 1.
template <Scalar T>
GradStore<T> backward(const Graph<T>& g, NodeId loss) {
  if (g.value(loss).size() != 1)
    throw ContractError("backward: loss node " + std::to_string(loss) + " has shape " +
                        shape_str(g.value(loss).shape()) + ", expected a scalar");
  return backward(g, loss, Tensor<T>::full(g.value(loss).shape(), T(1)));
}

template <Scalar T>
GradStore<T> backward(const Var<T>& loss) {
  return backward(*loss.graph, loss.id);
}

}  // namespace mirage::ag
