#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cytograd/error.hpp"
#include "cytograd/tensor.hpp"

namespace cytograd {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
  friend auto operator<=>(NodeId, NodeId) = default;
};

/// Gradients produced by one backward pass, keyed by node.
class Gradients {
 public:
  const Tensor& operator[](NodeId id) const {
    auto it = grads_.find(id.index);
    if (it == grads_.end()) {
      throw Error("no gradient was requested for node " + std::to_string(id.index));
    }
    return it->second;
  }
  bool contains(NodeId id) const { return grads_.count(id.index) != 0; }
  std::size_t size() const { return grads_.size(); }
  Tensor take(NodeId id) { return std::move(grads_.at(id.index)); }

 private:
  friend class Graph;
  std::unordered_map<std::size_t, Tensor> grads_;
};

/// Append-only tape of differentiable operations.
///
/// Nodes are recorded in execution order, so index order is a topological
/// order. A graph is rebuilt for every forward pass and owned by one thread.
class Graph {
 public:
  /// Accumulates input gradients given the gradient of the node's output.
  /// Entries of `grad_inputs` are null for inputs that need no gradient.
  using BackwardFn =
      std::function<void(const Tensor& grad_output, std::span<Tensor* const> grad_inputs)>;

  NodeId leaf(Tensor value) {
    check_finite("leaf", value);
    nodes_.push_back(Node{"leaf", std::move(value), {}, {}});
    return NodeId{nodes_.size() - 1};
  }

  NodeId record(std::string_view op, Tensor value, std::vector<NodeId> inputs, BackwardFn fn) {
    for (NodeId in : inputs) {
      if (in.index >= nodes_.size()) throw Error("node input refers to a future node");
    }
    check_finite(op, value);
    nodes_.push_back(Node{std::string(op), std::move(value), std::move(inputs), std::move(fn)});
    return NodeId{nodes_.size() - 1};
  }

  const Tensor& value(NodeId id) const { return node(id).value; }
  const Shape& shape(NodeId id) const { return node(id).value.shape(); }
  const std::string& op(NodeId id) const { return node(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar output. Only the requested nodes are
  /// returned; work is limited to nodes between `wanted` and `output`.
  Gradients backward(NodeId output, std::span<const NodeId> wanted) const {
    const Node& out = node(output);
    if (out.value.size() != 1) {
      throw DimensionError("backward needs a scalar output, got shape " +
                           to_string(out.value.shape()));
    }
    const std::size_t n = output.index + 1;

    std::vector<char> ancestor(n, 0);
    ancestor[output.index] = 1;
    for (std::size_t i = n; i-- > 0;) {
      if (!ancestor[i]) continue;
      for (NodeId in : nodes_[i].inputs) ancestor[in.index] = 1;
    }
    std::vector<char> relevant(n, 0);
    for (NodeId w : wanted) {
      if (w.index >= n || !ancestor[w.index]) {
        throw Error("node " + std::to_string(w.index) + " is not an ancestor of the output node " +
                    std::to_string(output.index));
      }
      relevant[w.index] = 1;
    }
    // Forward sweep: a node is relevant if it depends on a wanted node.
    for (std::size_t i = 0; i < n; ++i) {
      if (relevant[i] || !ancestor[i]) continue;
      for (NodeId in : nodes_[i].inputs) {
        if (relevant[in.index]) {
          relevant[i] = 1;
          break;
        }
      }
    }

    std::vector<Tensor> grads(n);
    grads[output.index] = Tensor(out.value.shape(), 1.0);
    std::vector<Tensor*> slots;
    for (std::size_t i = n; i-- > 0;) {
      if (!relevant[i] || grads[i].empty() || !nodes_[i].backward) continue;
      const Node& nd = nodes_[i];
      slots.assign(nd.inputs.size(), nullptr);
      for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
        std::size_t j = nd.inputs[k].index;
        if (!relevant[j]) continue;
        if (grads[j].empty()) grads[j] = Tensor(nodes_[j].value.shape(), 0.0);
        slots[k] = &grads[j];
      }
      nd.backward(grads[i], slots);
      for (Tensor* g : slots) {
        if (g && !g->all_finite()) {
          throw NumericError("non-finite gradient flowing out of op '" + nd.op + "' (node " +
                             std::to_string(i) + ")");
        }
      }
      bool keep = false;
      for (NodeId w : wanted) keep = keep || w.index == i;
      if (!keep) grads[i] = Tensor();
    }

    Gradients result;
    for (NodeId w : wanted) {
      Tensor g = grads[w.index].empty() ? Tensor(nodes_[w.index].value.shape(), 0.0)
                                        : grads[w.index];
      result.grads_.insert_or_assign(w.index, std::move(g));
    }
    return result;
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
  };

  const Node& node(NodeId id) const {
    if (id.index >= nodes_.size()) throw Error("unknown node " + std::to_string(id.index));
    return nodes_[id.index];
  }

  static void check_finite(std::string_view op, const Tensor& value) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace cytograd
