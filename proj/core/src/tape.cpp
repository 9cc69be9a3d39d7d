#include "morphgrad/tape.hpp"

namespace morphgrad {

Tensor Tape::watch(const Tensor& t) {
  if (!t.defined()) throw UsageError("watch() on an undefined tensor");
  Tensor tracked = t;
  int id = append(t.shape(), {}, nullptr);
  tracked.bind(this, id);
  return tracked;
}

int Tape::append(const Shape& shape, std::vector<int> parents, BackwardFn backward) {
  for (int p : parents) {
    if (p >= static_cast<int>(nodes_.size()))
      throw UsageError("tape node refers to a parent that does not exist yet");
  }
  nodes_.push_back(Node{shape, std::move(parents), std::move(backward)});
  grads_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buffer(int node) {
  auto& buf = grads_.at(node);
  if (buf.empty()) buf.assign(shape_numel(nodes_[node].shape), 0.0);
  return buf;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.tracked() || loss.tape() != this)
    throw UsageError("backward() needs a loss recorded on this tape");
  if (loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  grad_buffer(loss.node())[0] = 1.0;
  for (int i = loss.node(); i >= 0; --i) {
    if (grads_[i].empty()) continue;  // not reachable from the loss
    if (nodes_[i].backward) nodes_[i].backward(std::span<const double>(grads_[i]), *this);
  }
}

bool Tape::has_grad(const Tensor& t) const {
  return t.tracked() && t.tape() == this && !grads_.at(t.node()).empty();
}

Tensor Tape::grad(const Tensor& t) const {
  if (!t.tracked() || t.tape() != this)
    throw UsageError("grad() of a tensor that is not tracked on this tape");
  const auto& buf = grads_.at(t.node());
  if (buf.empty()) return Tensor(t.shape());
  return Tensor(t.shape(), buf);
}

const std::vector<int>& Tape::parents_of(int node) const { return nodes_.at(node).parents; }

const Shape& Tape::shape_of(int node) const { return nodes_.at(node).shape; }

Tape* common_tape(std::initializer_list<const Tensor*> operands) {
  Tape* tape = nullptr;
  for (const Tensor* t : operands) {
    if (!t || !t->tracked()) continue;
    if (tape && t->tape() != tape)
      throw UsageError("operands were recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace morphgrad
