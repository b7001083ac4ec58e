#include "tdlm/graph.hpp"

#include <algorithm>

namespace tdlm {

const Shape& Var::shape() const { return graph_->shape_of(id_); }
std::size_t Var::size() const { return graph_->value_of(id_).size(); }

std::size_t Var::rows() const {
  const auto& s = shape();
  if (s.size() <= 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

std::size_t Var::cols() const { return shape().empty() ? 1 : shape().back(); }
std::span<const Scalar> Var::value() const { return graph_->value_of(id_); }

Scalar Var::item() const {
  auto v = value();
  if (v.size() != 1)
    throw ContractError("item() on non-scalar node of shape " + shape_str(shape()));
  return v[0];
}

std::span<const Scalar> Var::grad() const { return graph_->grad_if_any(id_); }

Tensor Var::to_tensor() const {
  auto v = value();
  return Tensor(shape(), std::vector<Scalar>(v.begin(), v.end()));
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor t) {
  Node n;
  n.shape = t.shape();
  n.owned = std::move(t.values());
  n.length = n.owned.size();
  return push(std::move(n));
}

Var Graph::leaf(const Tensor& t) {
  Node n;
  n.shape = t.shape();
  n.external = t.data().data();
  n.length = t.size();
  return push(std::move(n));
}

Var Graph::param(Tensor& t) {
  Node n;
  n.shape = t.shape();
  n.external = t.data().data();
  n.length = t.size();
  n.bound = &t;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::emit(Shape shape, std::vector<Scalar> value, std::initializer_list<Var> parents,
                BackwardFn fn) {
  return emit(std::move(shape), std::move(value), std::vector<Var>(parents), std::move(fn));
}

Var Graph::emit(Shape shape, std::vector<Scalar> value, const std::vector<Var>& parents,
                BackwardFn fn) {
  if (value.size() != shape_size(shape))
    throw ShapeError("node value length does not match shape " + shape_str(shape));
  Node n;
  n.shape = std::move(shape);
  n.owned = std::move(value);
  n.length = n.owned.size();
  for (const auto& p : parents) {
    if (&p.graph() != this) throw ContractError("operands belong to different graphs");
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

std::span<const Scalar> Graph::value_of(std::uint32_t id) const {
  const auto& n = nodes_[id];
  if (n.external) return {n.external, n.length};
  return n.owned;
}

std::span<Scalar> Graph::grad_of(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.size() != n.length) n.grad.assign(n.length, Scalar(0));
  return n.grad;
}

void Graph::propagate(Var root) {
  if (&root.graph() != this) throw ContractError("root belongs to a different graph");
  if (root.size() != 1)
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  for (auto& n : nodes_) n.grad.clear();
  grad_of(root.id())[0] = Scalar(1);
  for (std::uint32_t id = root.id() + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

void Graph::backward(Var root) {
  propagate(root);
  for (auto& n : nodes_) {
    if (!n.bound || n.grad.empty()) continue;
    auto dst = n.bound->grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
  }
}

}  // namespace tdlm
