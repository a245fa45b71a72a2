#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <vector>

#include "quicknat/tensor.hpp"

namespace quicknat {

/// Handle to a value recorded on a Tape. Only meaningful for the tape that issued it.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

/// Reverse-mode differentiation tape. Operations append nodes in execution
/// order, so every node's inputs precede it; backward() walks the nodes in
/// exact reverse order and accumulates gradients additively.
template <typename T>
class Tape {
 public:
  /// Called during backward with the tape and the node's own handle; reads
  /// grad(self) and accumulates into grad_buffer(input) for each input that
  /// requires_grad.
  using BackwardFn = std::function<void(Tape&, Var)>;

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn backward) {
    bool needs = false;
    for (Var in : inputs) needs = needs || requires_grad(in);
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Gradient of the last backward() target with respect to v (zeros if v was unreached).
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    return n.grad.empty() ? Tensor<T>::zeros_like(n.value) : n.grad;
  }

  const Tensor<T>& grad_ref(Var v) const { return node(v).grad; }

  Tensor<T>& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>::zeros_like(n.value);
    return n.grad;
  }

  void backward(Var output) {
    if (value(output).size() != 1) {
      throw ShapeError("backward requires a scalar output, got shape " + to_string(value(output).shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor<T>();
    grad_buffer(output)[0] = T(1);
    for (std::size_t id = output.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(*this, Var{id});
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this tape");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

}  // namespace quicknat
