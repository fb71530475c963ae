// tensor.cpp — see tensor.hpp.
#include "regseg/tensor.hpp"

#include <unordered_set>

namespace regseg::nn {

NodePtr make_leaf(std::vector<int> shape, Arr value, bool requires_grad) {
  if (shape_size(shape) != static_cast<std::size_t>(value.size()))
    throw std::invalid_argument("make_leaf: value size does not match shape");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

NodePtr zeros(std::vector<int> shape, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return make_leaf(std::move(shape), Arr::Zero(static_cast<long>(n)),
                   requires_grad);
}

NodePtr make_result(std::vector<int> shape, Arr value,
                    std::vector<NodePtr> parents,
                    std::function<void(Node&)> backprop) {
  if (shape_size(shape) != static_cast<std::size_t>(value.size()))
    throw std::invalid_argument("make_result: value size does not match shape");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->backprop = std::move(backprop);
  for (const auto& p : n->parents)
    if (p->requires_grad || !p->parents.empty()) {
      n->requires_grad = true;
      break;
    }
  return n;
}

NodePtr detach(const NodePtr& x) {
  return make_leaf(x->shape, x->value, false);
}

namespace {

// Post-order over parent edges: every node lands after all its parents, so
// the reversed list runs consumers before producers.
void topo_visit(const NodePtr& n, std::unordered_set<Node*>& seen,
                std::vector<NodePtr>& order) {
  if (!seen.insert(n.get()).second) return;
  // Iterative DFS to keep deep chains off the call stack.
  std::vector<std::pair<NodePtr, std::size_t>> stack{{n, 0}};
  seen.insert(n.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (next < cur->parents.size()) {
      const NodePtr& p = cur->parents[next++];
      if (seen.insert(p.get()).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(cur);
      stack.pop_back();
    }
  }
}

}  // namespace

void backward(const NodePtr& root) {
  if (root->size() != 1)
    throw std::invalid_argument("backward: root must be a scalar");
  std::unordered_set<Node*> seen;
  std::vector<NodePtr> order;
  seen.reserve(1024);
  order.reserve(1024);
  topo_visit(root, seen, order);

  for (const auto& n : order) {
    n->ensure_grad();
    n->grad.setZero();
  }
  root->grad(0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

void zero_grads(const std::vector<NodePtr>& params) {
  for (const auto& p : params) {
    p->ensure_grad();
    p->grad.setZero();
  }
}

}  // namespace regseg::nn
