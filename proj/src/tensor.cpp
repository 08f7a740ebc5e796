#include "qlab/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace qlab {

namespace {
constexpr std::size_t kUntracked = std::numeric_limits<std::size_t>::max();
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
Tensor<T>::Tensor() : shape_{}, values_(std::make_shared<std::vector<T>>(1, T{0})) {}

template <typename T>
Tensor<T>::Tensor(Shape shape)
    : shape_(std::move(shape)), values_(std::make_shared<std::vector<T>>(numel(shape_), T{0})) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor: zero-sized axis in shape " + to_string(shape_));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), values_(std::make_shared<std::vector<T>>(std::move(values))) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor: zero-sized axis in shape " + to_string(shape_));
  if (numel(shape_) != values_->size())
    throw ShapeError("tensor: shape " + to_string(shape_) + " needs " + std::to_string(numel(shape_)) +
                     " values, got " + std::to_string(values_->size()));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  int r = static_cast<int>(shape_.size());
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  return shape_[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (values_->size() != 1) throw ShapeError("item: expected a single value, got shape " + to_string(shape_));
  return (*values_)[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out = *this;
  out.tape_ = nullptr;
  out.node_ = 0;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape_, *values_);
}

template <typename T>
Tensor<T> Tensor<T>::view(Shape shape) const {
  if (numel(shape) != size())
    throw ShapeError("view: cannot view " + to_string(shape_) + " as " + to_string(shape));
  Tensor out = detach();
  out.shape_ = std::move(shape);
  return out;
}

template <typename T>
Tensor<T> Gradients<T>::of(const Tensor<T>& leaf) const {
  if (leaf.requires_grad()) {
    auto it = grads_.find(leaf.node());
    if (it != grads_.end()) return it->second;
  }
  return Tensor<T>(leaf.shape());
}

template <typename T>
Tensor<T> Tape<T>::watch(const Tensor<T>& value) {
  Tensor<T> out = value.detach();
  out.tape_ = this;
  out.node_ = nodes_.size();
  nodes_.push_back(Node{out.shape(), {}, {}, true});
  return out;
}

template <typename T>
Tensor<T> Tape<T>::record(Tensor<T> result, const std::vector<Tensor<T>>& inputs, BackwardFn backward) {
  Node node{result.shape(), {}, std::move(backward), false};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.requires_grad() && in.tape() != this) throw std::logic_error("tape: input recorded on a different tape");
    node.inputs.push_back(in.requires_grad() ? in.node() : kUntracked);
  }
  result.tape_ = this;
  result.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return result;
}

template <typename T>
Gradients<T> Tape<T>::backward(const Tensor<T>& loss) const {
  if (!loss.requires_grad() || loss.tape() != this) throw std::logic_error("backward: loss is not recorded on this tape");
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));

  std::vector<std::vector<T>> grads(nodes_.size());
  grads[loss.node()] = {T{1}};
  std::vector<std::vector<T>*> slots;
  for (std::size_t i = loss.node() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || node.leaf) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      std::size_t in = node.inputs[j];
      if (in == kUntracked) continue;
      if (grads[in].empty()) grads[in].assign(numel(nodes_[in].shape), T{0});
      slots[j] = &grads[in];
    }
    node.backward(grads[i], slots);
    std::vector<T>().swap(grads[i]);
  }

  Gradients<T> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].leaf && !grads[i].empty()) out.grads_.emplace(i, Tensor<T>(nodes_[i].shape, std::move(grads[i])));
  return out;
}

template <typename T>
Tape<T>* common_tape(std::string_view op, std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const auto* in : inputs) {
    if (!in->requires_grad()) continue;
    if (tape && tape != in->tape()) throw std::logic_error(std::string(op) + ": inputs recorded on different tapes");
    tape = in->tape();
  }
  return tape;
}

template class Tensor<float>;
template class Tensor<double>;
template class Gradients<float>;
template class Gradients<double>;
template class Tape<float>;
template class Tape<double>;
template Tape<float>* common_tape(std::string_view, std::initializer_list<const Tensor<float>*>);
template Tape<double>* common_tape(std::string_view, std::initializer_list<const Tensor<double>*>);

}  // namespace qlab
