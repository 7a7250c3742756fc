#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ast/tensor.hpp"

namespace ast {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, index_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  index_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  index_t id_ = -1;
};

/// Reverse-mode recording. Nodes are appended in evaluation order, so the
/// node list is already topologically sorted; backward walks it in reverse.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var<T>(this, static_cast<index_t>(nodes_.size()) - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Records an op output. The backward closure is dropped when no input
  // requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || requires_grad(v.id());
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, static_cast<index_t>(nodes_.size()) - 1);
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || requires_grad(v.id());
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, static_cast<index_t>(nodes_.size()) - 1);
  }

  const Tensor<T>& value(index_t id) const { return node(id).value; }
  bool requires_grad(index_t id) const { return node(id).requires_grad; }
  index_t size() const { return static_cast<index_t>(nodes_.size()); }

  // Gradient accumulated on `v`, zeros when nothing flowed into it.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = node(v.id());
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  Tensor<T>& grad_buffer(index_t id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(index_t id, const Tensor<T>& g) {
    if (!requires_grad(id)) return;
    Tensor<T>& buf = grad_buffer(id);
    if (g.size() != buf.size()) throw DimensionError("gradient shape mismatch on node " + std::to_string(id));
    for (index_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  void backward(const Var<T>& loss) {
    if (loss.valid() && &loss.tape() != this) throw ContractError("backward: loss recorded on another tape");
    if (loss.value().size() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    if (backward_done_) throw ContractError("backward: tape already consumed; record a new forward pass");
    backward_done_ = true;
    grad_buffer(loss.id()).fill(T(1));
    for (index_t id = loss.id(); id >= 0; --id) {
      Node& n = node(id);
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Node& node(index_t id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const Node& node(index_t id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

/// Binds model parameter tensors to tape leaves, one leaf per tensor.
template <class T>
class ParamScope {
 public:
  ParamScope(Tape<T>& tape, bool requires_grad) : tape_(&tape), requires_grad_(requires_grad) {}

  Var<T> operator()(const Tensor<T>& p) {
    auto it = vars_.find(&p);
    if (it != vars_.end()) return it->second;
    Var<T> v = tape_->leaf(p, requires_grad_);
    vars_.emplace(&p, v);
    return v;
  }

  Tape<T>& tape() const { return *tape_; }

  Tensor<T> grad(const Tensor<T>& p) const {
    auto it = vars_.find(&p);
    if (it == vars_.end()) return Tensor<T>(p.shape());
    return tape_->grad(it->second);
  }

 private:
  Tape<T>* tape_;
  bool requires_grad_;
  std::unordered_map<const Tensor<T>*, Var<T>> vars_;
};

}  // namespace ast
