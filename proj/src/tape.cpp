#include "rrlab/tape.hpp"

#include <algorithm>
#include <sstream>

namespace rrlab {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

ShapeError::ShapeError(const std::string& primitive, const std::string& detail)
    : std::invalid_argument(primitive + ": " + detail), primitive_(primitive) {}

std::uint64_t fnv1a(const void* bytes, std::size_t count, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < count; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace rrlab

namespace rrlab::ad {

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node node;
  node.op = "leaf";
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                       BackwardFn backward) {
  if (backward_done_) throw TapeError(std::string(op) + ": tape already consumed by backward");
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape() != this) throw TapeError(std::string(op) + ": input belongs to another tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::accumulate(NodeId id) {
  Node& node = nodes_.at(id);
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape);
  return node.grad;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(NodeId id) {
  return accumulate(id);
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape() != this) throw TapeError("backward: loss belongs to another tape");
  if (backward_done_) throw TapeError("backward: called twice on one tape");
  const Node& root = nodes_.at(loss.id());
  if (root.value.size() != 1) {
    throw TapeError("backward: loss must be scalar, got shape " + shape_string(root.value.shape));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  accumulate(loss.id()).data[0] = T{1};
  for (NodeId i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
    // Inputs always precede the node and accumulate() never resizes nodes_,
    // so this reference stays valid while the closure runs.
    node.backward(*this, node.grad);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace rrlab::ad
