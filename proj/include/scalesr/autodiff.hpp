#pragma once

// Minimal reverse-mode automatic differentiation over 4-D (N, C, H, W)
// tensors. A Tape records the nodes created during one forward pass; calling
// backward() on a scalar node propagates gradients to every node that
// requires them and accumulates parameter gradients into their Parameter.

#include <cassert>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "scalesr/errors.hpp"

namespace scalesr::ad {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(n) * c * static_cast<std::size_t>(h) * w;
  }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

/// A trainable array. `grad` accumulates across backward passes until reset.
template <class T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter(std::string nm, Shape s) : name(std::move(nm)), shape(s), value(s.size(), T(0)), grad(s.size(), T(0)) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  Parameter<T>* param = nullptr;
  std::function<void()> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Node<T>* n) : node_(n) {}

  Node<T>* node() const noexcept { return node_; }
  const Shape& shape() const { return node_->shape; }
  const std::vector<T>& value() const { return node_->value; }
  std::vector<T>& mutable_value() { return node_->value; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  explicit operator bool() const noexcept { return node_ != nullptr; }

 private:
  Node<T>* node_ = nullptr;
};

template <class T>
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Shape s, std::vector<T> v) {
    if (v.size() != s.size()) throw DimensionError("Tape::constant: size " + std::to_string(v.size()) + " vs " + s.str());
    auto* n = push(s);
    n->value = std::move(v);
    return Var<T>(n);
  }

  Var<T> param(Parameter<T>& p) {
    auto* n = push(p.shape);
    n->value = p.value;
    n->requires_grad = grad_enabled_;
    n->param = &p;
    return Var<T>(n);
  }

  /// Create the output node of an op. `bw` is only kept when some input
  /// requires gradients.
  Var<T> make(Shape s, std::vector<T> value, std::initializer_list<Var<T>> inputs, std::function<void()> bw = {}) {
    auto* n = push(s);
    n->value = std::move(value);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    n->requires_grad = grad_enabled_ && rg;
    if (n->requires_grad) n->backward = std::move(bw);
    return Var<T>(n);
  }

  using GradSink = std::unordered_map<const Parameter<T>*, std::vector<T>>;

  /// Seeds d(root)/d(root) = 1 for a single-element root and runs the
  /// recorded closures in reverse creation order. Parameter gradients are
  /// added to Parameter::grad, or to `sink` when one is given so that worker
  /// threads never touch shared parameters.
  void backward(Var<T> root, GradSink* sink = nullptr) {
    if (root.shape().size() != 1) throw DimensionError("Tape::backward: root must be a scalar");
    if (!root.requires_grad()) return;
    root.node()->ensure_grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward();
      if (n.param) {
        std::vector<T>* dst = &n.param->grad;
        if (sink) {
          auto& slot = (*sink)[n.param];
          if (slot.empty()) slot.assign(n.grad.size(), T(0));
          dst = &slot;
        }
        for (std::size_t k = 0; k < n.grad.size(); ++k) (*dst)[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  Node<T>* push(Shape s) {
    nodes_.push_back(std::make_unique<Node<T>>());
    nodes_.back()->shape = s;
    return nodes_.back().get();
  }

  std::vector<std::unique_ptr<Node<T>>> nodes_;
  bool grad_enabled_ = true;
};

/// Gradient slot of an input node, or nullptr if it does not need one.
template <class T>
std::vector<T>* grad_slot(const Var<T>& v) {
  return v.requires_grad() ? &v.node()->ensure_grad() : nullptr;
}

}  // namespace scalesr::ad
