#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "psound/tensor.hpp"

namespace psound {

template <typename T>
class Tape;

/// One node of the computation record: a value, its (lazily allocated)
/// gradient, and a closure that scatters this node's gradient into the
/// gradients of its parents.
template <typename T>
struct TapeNode {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first needed; same shape as value afterwards
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TapeNode<T>>> parents;
  std::function<void(TapeNode<T>&)> backward;
  std::int64_t seq = -1;  // position in the tape record, -1 for leaves

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
  void zero_grad_buffer() {
    if (grad.size() == value.size()) grad.fill(T(0));
  }
};

/// Handle to a tape node. Copies share the underlying node, which is how
/// trainable parameters stay alive across tape resets.
template <typename T>
class Variable {
 public:
  Variable() = default;
  Variable(Tape<T>* tape, std::shared_ptr<TapeNode<T>> node)
      : tape_(tape), node_(std::move(node)) {}

  static Variable leaf(Tape<T>& tape, Tensor<T> value, bool requires_grad) {
    auto node = std::make_shared<TapeNode<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    node->leaf = true;
    return Variable(&tape, std::move(node));
  }

  bool valid() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient accumulated by the latest backward pass(es). Zero before any.
  const Tensor<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->zero_grad_buffer(); }

  Tape<T>* tape() const { return tape_; }
  const std::shared_ptr<TapeNode<T>>& node() const { return node_; }
  std::int64_t tape_id() const { return node_->seq; }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::shared_ptr<TapeNode<T>> node_;
};

/// Append-only record of non-leaf nodes in creation order (which is a
/// topological order by construction). One training step is single-writer.
template <typename T>
class Tape {
 public:
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  /// Register the result of an operation. When gradients are disabled or no
  /// parent needs a gradient, the node is emitted detached: no parents, no
  /// backward closure, not recorded.
  Variable<T> emit(Tensor<T> value, const char* op,
                   std::vector<std::shared_ptr<TapeNode<T>>> parents,
                   std::function<void(TapeNode<T>&)> backward) {
    auto node = std::make_shared<TapeNode<T>>();
    node->value = std::move(value);
    node->leaf = false;
    node->op = op;
    bool track = grad_enabled_;
    if (track) {
      bool any = false;
      for (const auto& p : parents) any = any || p->requires_grad;
      track = any;
    }
    if (track) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(backward);
      node->seq = static_cast<std::int64_t>(record_.size());
      record_.push_back(node);
    }
    return Variable<T>(this, std::move(node));
  }

  /// Reverse pass from a scalar root. Interior gradients are reset first, so
  /// each call contributes exactly one root-seed to every leaf gradient;
  /// repeated calls accumulate additively into leaves.
  void backward(const Variable<T>& root) {
    const auto& rn = root.node();
    if (rn->value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!rn->requires_grad || rn->seq < 0) {
      throw std::invalid_argument("backward: root is not attached to the tape");
    }
    for (std::int64_t i = 0; i <= rn->seq; ++i) record_[i]->zero_grad_buffer();
    rn->ensure_grad()[0] = T(1);
    for (std::int64_t i = rn->seq; i >= 0; --i) {
      TapeNode<T>& node = *record_[i];
      if (node.backward) node.backward(node);
    }
  }

  /// Drop all recorded interior nodes. Leaves held elsewhere survive.
  void clear() { record_.clear(); }

  std::size_t size() const { return record_.size(); }

 private:
  std::vector<std::shared_ptr<TapeNode<T>>> record_;
  bool grad_enabled_ = true;
};

/// Scoped gradient off-switch for evaluation paths.
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

}  // namespace psound
