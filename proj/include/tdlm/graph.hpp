#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tdlm/tensor.hpp"

namespace tdlm {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::span<const Scalar> value() const;
  // Value of a single-element node.
  Scalar item() const;
  // Gradient computed by the last propagate/backward; empty if none reached it.
  std::span<const Scalar> grad() const;
  Tensor to_tensor() const;

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

// Append-only tape for reverse-mode differentiation. Nodes are stored in
// creation order, so every parent id is smaller than its child's id and the
// reverse insertion order is a valid topological order for backward.
//
// A graph and its nodes belong to one thread at a time.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Owned copy of t; never receives gradient.
  Var constant(Tensor t);
  // References t without copying; never receives gradient. t must outlive the graph.
  Var leaf(const Tensor& t);
  // References t; backward() accumulates d(root)/d(t) into t.grad().
  Var param(Tensor& t);

  // Propagates d(root)/d(node) to every node and then adds leaf gradients into
  // the bound tensors. Accumulates across calls; zero the tensors to reset.
  void backward(Var root);
  // Same as backward() without touching bound tensors; read results via Var::grad().
  void propagate(Var root);

  std::size_t size() const { return nodes_.size(); }

  // --- op author interface ------------------------------------------------
  Var emit(Shape shape, std::vector<Scalar> value, std::initializer_list<Var> parents,
           BackwardFn fn);
  Var emit(Shape shape, std::vector<Scalar> value, const std::vector<Var>& parents,
           BackwardFn fn);

  const Shape& shape_of(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const Scalar> value_of(std::uint32_t id) const;
  // Gradient buffer of node id, allocated (zeroed) on first access.
  std::span<Scalar> grad_of(std::uint32_t id);
  std::span<const Scalar> grad_if_any(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::uint32_t>& parents_of(std::uint32_t id) const {
    return nodes_[id].parents;
  }

 private:
  struct Node {
    Shape shape;
    std::vector<Scalar> owned;
    const Scalar* external = nullptr;
    std::size_t length = 0;
    Tensor* bound = nullptr;
    std::vector<std::uint32_t> parents;
    BackwardFn backward;
    std::vector<Scalar> grad;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

}  // namespace tdlm
