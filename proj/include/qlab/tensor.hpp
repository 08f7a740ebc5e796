#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <initializer_list>
#include <vector>

namespace qlab {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised for any shape-rule violation; the message names the op and both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class Tape;

/// Dense row-major tensor. Copies share storage (like a handle); use clone()
/// for an independent buffer. A tensor that belongs to a tape participates in
/// reverse-mode differentiation; the scalar type fixes the working precision
/// (float for training, double for finite-difference and curvature work).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value);
  static Tensor full(Shape shape, T value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  /// Size of one axis; negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t size() const { return values_->size(); }

  std::span<const T> values() const { return *values_; }
  std::span<T> mutable_values() { return *values_; }
  T operator[](std::size_t i) const { return (*values_)[i]; }
  T item() const;

  bool requires_grad() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  /// Position of this tensor's node on its tape; meaningless when untracked.
  std::size_t node() const { return node_; }

  /// Same storage, no tape.
  Tensor detach() const;
  /// Independent copy of the values, no tape.
  Tensor clone() const;
  /// Same storage viewed with a new shape of equal element count (no tape).
  Tensor view(Shape shape) const;

  bool same_storage(const Tensor& other) const { return values_ == other.values_; }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<std::vector<T>> values_;
  Tape<T>* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Gradients produced by Tape::backward, keyed by tape node.
template <typename T>
class Gradients {
 public:
  /// Gradient of `leaf`; zeros of the leaf's shape when it was unreachable.
  Tensor<T> of(const Tensor<T>& leaf) const;
  bool contains(std::size_t node) const { return grads_.count(node) != 0; }
  const std::map<std::size_t, Tensor<T>>& by_node() const { return grads_; }

 private:
  friend class Tape<T>;
  std::map<std::size_t, Tensor<T>> grads_;
};

/// Linear record of differentiable operations. Nodes are appended in execution
/// order, which is a topological order; backward walks it once in reverse.
/// A tape and its tensors must stay on one thread at a time.
template <typename T>
class Tape {
 public:
  /// Receives the gradient of a node's output and accumulates into the
  /// gradients of its inputs. `input_grads[i]` is null for untracked inputs.
  using BackwardFn =
      std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> input_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf sharing its storage.
  Tensor<T> watch(const Tensor<T>& value);

  /// Appends an op node producing `result` from `inputs` (tracked or not).
  Tensor<T> record(Tensor<T> result, const std::vector<Tensor<T>>& inputs, BackwardFn backward);

  Gradients<T> backward(const Tensor<T>& loss) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<std::size_t> inputs;  // node ids, or npos for untracked inputs
    BackwardFn backward;              // empty for leaves
    bool leaf = false;
  };
  std::vector<Node> nodes_;
};

/// Tape shared by every tracked tensor in `inputs`; null when none is tracked.
/// Throws when tracked inputs live on different tapes.
template <typename T>
Tape<T>* common_tape(std::string_view op, std::initializer_list<const Tensor<T>*> inputs);

}  // namespace qlab
