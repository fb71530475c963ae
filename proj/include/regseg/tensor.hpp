// tensor.hpp — reverse-mode automatic differentiation over dense arrays.
//
// A Node owns a flat double-precision value array plus the closure that,
// given the node's gradient, accumulates into its parents' gradients. Graphs
// are built by the free functions in ops.hpp; backward() walks the ancestor
// DAG of a scalar root once, in reverse topological order. Everything is
// double precision so finite-difference checks have headroom.
#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace regseg::nn {

using Arr = Eigen::ArrayXd;

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  std::vector<int> shape;
  Arr value;
  Arr grad;  // sized on demand; leaves keep theirs across backward calls
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, adds to parents

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
  int dim(std::size_t i) const {
    if (i >= shape.size()) throw std::invalid_argument("Node: rank too low");
    return shape[i];
  }
  void ensure_grad() {
    if (grad.size() != value.size()) grad = Arr::Zero(value.size());
  }
};

inline std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (const int d : shape) {
    if (d <= 0) throw std::invalid_argument("shape dims must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

/// A node with no parents. `requires_grad` marks trainable parameters.
NodePtr make_leaf(std::vector<int> shape, Arr value, bool requires_grad);
NodePtr zeros(std::vector<int> shape, bool requires_grad = false);

/// Internal-use constructor for op results.
NodePtr make_result(std::vector<int> shape, Arr value,
                    std::vector<NodePtr> parents,
                    std::function<void(Node&)> backprop);

/// Copy of the value with the graph cut; gradients stop here.
NodePtr detach(const NodePtr& x);

/// Reverse-mode sweep from a scalar root. Gradients of every node in the
/// root's ancestor graph are (re)initialized to zero first, so repeated
/// backward calls do not accumulate; nodes outside the graph are untouched.
void backward(const NodePtr& root);

void zero_grads(const std::vector<NodePtr>& params);

}  // namespace regseg::nn
