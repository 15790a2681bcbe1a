#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rrlab/tensor.hpp"

namespace rrlab::ad {

using NodeId = std::size_t;

template <typename T>
class Tape;

/// Lightweight handle to one node of a tape. Copyable; the tape owns the data.
template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Tensor<T>& grad() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

  NodeId id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  NodeId id_ = 0;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Eager reverse-mode tape. Nodes are appended in execution order, so the
/// node list is already a topological order; backward walks it once in
/// reverse from the loss node.
///
/// A tape is single-writer. Separate tapes are fully independent.
template <typename T>
class Tape {
 public:
  /// Receives the gradient flowing into the node's output and accumulates
  /// into its inputs through `accumulate`.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends a primitive's output. The node requires grad iff any input does;
  /// `backward` is dropped otherwise.
  Var<T> record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward);

  /// Populates gradients of every grad-requiring node reachable from `loss`.
  /// Fails on non-scalar losses and on a second call.
  void backward(const Var<T>& loss);

  bool backward_done() const noexcept { return backward_done_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  const Tensor<T>& grad(NodeId id);
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  const std::string& op_name(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }

  /// Gradient buffer of `id`, zero-initialized on first use. Only valid for
  /// grad-requiring nodes; backward closures call this for their inputs.
  Tensor<T>& accumulate(NodeId id);

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
  return tape_->grad(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace rrlab::ad
