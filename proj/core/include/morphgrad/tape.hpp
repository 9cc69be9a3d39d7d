#pragma once

#include <functional>
#include <span>
#include <vector>

#include "morphgrad/tensor.hpp"

namespace morphgrad {

/// Append-only record of one forward pass enabling reverse-mode gradients.
///
/// Nodes are created in evaluation order, so creation order is already a
/// topological order: every node's parents precede it. backward() seeds the
/// loss with 1 and sweeps the node list once in reverse; each node's
/// backward function accumulates into its parents' gradient buffers.
///
/// A tape serves a single forward/backward pass and is not shared across
/// concurrent passes; independent tapes may run concurrently.
class Tape {
 public:
  /// Receives the output gradient of the node and accumulates into parent
  /// buffers via grad_buffer().
  using BackwardFn = std::function<void(std::span<const double>, Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Register a leaf (input or parameter). Returns a tracked alias.
  Tensor watch(const Tensor& t);

  /// Record an operation node. Parent entries may be -1 for untracked
  /// operands. Returns the new node id.
  int append(const Shape& shape, std::vector<int> parents, BackwardFn backward);

  /// Reverse sweep from a scalar loss recorded on this tape.
  void backward(const Tensor& loss);

  /// Gradient buffer of a node, allocated to zeros on first touch.
  std::vector<double>& grad_buffer(int node);

  bool has_grad(const Tensor& t) const;
  /// Gradient of a tracked tensor as a tensor of the same shape; zeros if
  /// the node was not reached from the loss.
  Tensor grad(const Tensor& t) const;

  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<int>& parents_of(int node) const;
  const Shape& shape_of(int node) const;

 private:
  struct Node {
    Shape shape;
    std::vector<int> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

/// The tape shared by a set of operands: nullptr when none is tracked;
/// throws UsageError when operands live on different tapes.
Tape* common_tape(std::initializer_list<const Tensor*> operands);

}  // namespace morphgrad
