#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "esf/error.hpp"
#include "esf/tensor.hpp"

namespace esf {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Nodes are appended in execution order, so the
/// record sequence is already topologically sorted; backward walks it in
/// reverse. Confined to a single thread.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    return push(std::move(value), false, nullptr, "constant");
  }

  Var<T> parameter(Tensor<T> value) {
    return push(std::move(value), true, nullptr, "parameter");
  }

  /// Appends the output of an operation. `backward` receives the accumulated
  /// gradient of this output and is only kept when some input needs a grad.
  Var<T> record(std::string_view op, Tensor<T> value,
                std::initializer_list<Var<T>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape() != this) {
        throw ContractError(std::string(op) + ": operand from another tape");
      }
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return record_with(op, std::move(value), needs, std::move(backward));
  }

  Var<T> record(std::string_view op, Tensor<T> value,
                const std::vector<Var<T>>& inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape() != this) {
        throw ContractError(std::string(op) + ": operand from another tape");
      }
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return record_with(op, std::move(value), needs, std::move(backward));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Adds `g` into the gradient slot of `v`. No-op for constants.
  void accumulate(const Var<T>& v, const Tensor<T>& g) {
    Node& node = nodes_[v.id()];
    if (!node.requires_grad) return;
    if (g.shape() != node.value.shape()) {
      throw DimensionError("gradient shape " + to_string(g.shape()) +
                           " does not match value " +
                           to_string(node.value.shape()) + " (" + node.op + ")");
    }
    if (node.grad.empty()) {
      node.grad = g;
      return;
    }
    T* dst = node.grad.data();
    const T* src = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  void accumulate(const Var<T>& v, Tensor<T>&& g) {
    Node& node = nodes_[v.id()];
    if (!node.requires_grad) return;
    if (node.grad.empty() && g.shape() == node.value.shape()) {
      node.grad = std::move(g);
      return;
    }
    accumulate(v, static_cast<const Tensor<T>&>(g));
  }

  void backward(const Var<T>& loss) {
    if (loss.tape() != this) throw ContractError("backward: foreign loss");
    if (loss.value().size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          to_string(loss.shape()));
    }
    if (consumed_) throw ContractError("backward: tape already consumed");
    consumed_ = true;
    Node& root = nodes_[loss.id()];
    if (!root.requires_grad) return;
    root.grad = Tensor<T>(root.value.shape(), T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(node.grad);
      // Intermediate gradients are no longer needed once propagated.
      node.backward = nullptr;
      node.grad = Tensor<T>();
    }
  }

  /// Gradient of a leaf after backward; zeros if the loss did not depend on it.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& node = nodes_.at(v.id());
    if (node.grad.empty()) return Tensor<T>(node.value.shape());
    return node.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool requires_grad = false;
    std::string op;
  };

  Var<T> record_with(std::string_view op, Tensor<T> value, bool needs,
                     Backward backward) {
    if (!all_finite(value)) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr,
                op);
  }

  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward,
              std::string_view op) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(backward),
                          requires_grad, std::string(op)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace esf
