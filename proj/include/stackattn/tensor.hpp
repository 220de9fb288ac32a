// Copyright 2026 The stackattn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stackattn/errors.hpp"

namespace stackattn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  // Empty until something accumulates into it.
  std::vector<T> grad;
  bool requires_grad = false;
  // Pushes this node's grad into its inputs. Captures the input nodes.
  std::function<void(Node&)> backward;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

template <typename T>
class Tape;

/// Dense row-major array of T that can take part in reverse-mode
/// differentiation. Copies share storage; values are treated as immutable
/// once an op has produced them.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor data length " +
                           std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }

  static Tensor full(Shape shape, T v) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  /// Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::size_t rows() const {
    require_rank(2);
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_rank(2);
    return node_->shape[1];
  }

  std::span<const T> data() const { return node_->value; }
  /// Mutable access for leaves (initializers and optimizers).
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const {
    return node_->value[r * node_->shape.at(1) + c];
  }

  T item() const {
    if (size() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy detached from any tape.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }

  void require_rank(std::size_t r) const {
    if (rank() != r) {
      throw DimensionError("expected rank " + std::to_string(r) +
                           " tensor, got shape " + shape_str(shape()));
    }
  }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Ordered record of the differentiable ops executed while the tape is
/// active on the current thread. Ops executed with no active tape are not
/// recorded and carry no gradient.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes a tape the recording target for this thread while in scope.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(current_) { current_ = &tape; }
    ~Scope() { current_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_; }

  void record(std::shared_ptr<detail::Node<T>> node) {
    if (replayed_) {
      throw ContractError("tape already replayed; call reset() before reuse");
    }
    nodes_.push_back(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }
  bool replayed() const { return replayed_; }

  /// Replays the tape in reverse, accumulating dLoss/dLeaf into every
  /// requires_grad leaf reachable from `loss`.
  void backward(const Tensor<T>& loss) {
    if (replayed_) {
      throw ContractError("backward() called twice without reset()");
    }
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss");
    }
    auto root = loss.node();
    if (!root->requires_grad) {
      throw ContractError("loss does not depend on any requires_grad tensor");
    }
    replayed_ = true;
    root->grad_buffer()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& node = **it;
      if (node.grad.empty() || !node.backward) continue;
      node.backward(node);
    }
  }

  void reset() {
    nodes_.clear();
    replayed_ = false;
  }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  bool replayed_ = false;
  static inline thread_local Tape* current_ = nullptr;
};

template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Wraps freshly computed values as an op result. When a tape is active and
/// some input needs a gradient, `make_backward` is invoked to build the
/// closure and the node is recorded.
template <typename T, typename MakeBackward>
Tensor<T> make_result(Shape shape, std::vector<T> values, bool needs_grad,
                      MakeBackward&& make_backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  Tape<T>* tape = Tape<T>::current();
  if (needs_grad && tape != nullptr) {
    auto node = out.node();
    node->requires_grad = true;
    node->backward = make_backward();
    tape->record(node);
  }
  return out;
}

}  // namespace detail

}  // namespace stackattn
