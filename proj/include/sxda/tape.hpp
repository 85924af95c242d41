#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string_view>
#include <vector>

#include "sxda/tensor.hpp"

namespace sxda {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the
/// owning tape is alive.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }

  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& dims() const { return value().dims(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t rank() const { return value().rank(); }
  std::size_t size() const { return value().size(); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Reverse-mode recording. Nodes are appended in evaluation order, so the
/// node list is topologically sorted by construction; backward walks it once
/// in reverse.
///
/// A tape and every Var on it belong to a single thread.
template <typename T>
class Tape {
 public:
  /// Called during backward with the node's accumulated output gradient.
  using BackwardFn = std::function<void(Tape&, const Buffer<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{"leaf", std::move(value), {}, requires_grad, nullptr});
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an operation node. The node requires grad iff any input does;
  /// otherwise the backward closure is dropped.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
  }

  Var<T> record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward) {
    bool rg = false;
    for (const auto& in : inputs) {
      check_owned(in);
      rg = rg || nodes_[in.id_].requires_grad;
    }
    nodes_.push_back(Node{op, std::move(value), {}, rg, rg ? std::move(backward) : nullptr});
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  /// Handle the next recorded node will receive. Lets a backward closure
  /// refer to its own output.
  Var<T> upcoming() noexcept { return Var<T>(this, static_cast<std::uint32_t>(nodes_.size())); }

  const Tensor<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id_].value;
  }

  bool requires_grad(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id_].requires_grad;
  }

  std::string_view op(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id_].op;
  }

  /// Gradient buffer to accumulate into, allocated on first use. Returns
  /// nullptr when the node does not require grad.
  T* grad_target(Var<T> v) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad.data();
  }

  /// dLoss/dv after backward(); zeros if v is not connected to the loss.
  Tensor<T> grad(Var<T> v) const {
    check_owned(v);
    const Node& n = nodes_[v.id_];
    if (n.grad.empty()) return Tensor<T>(n.value.dims());
    return Tensor<T>::unchecked(n.value.dims(), n.grad);
  }

  void backward(Var<T> loss) {
    check_owned(loss);
    if (nodes_[loss.id_].value.size() != 1)
      throw ContractError("backward needs a scalar loss, got shape " +
                          shape_str(nodes_[loss.id_].value.dims()));
    T* seed = grad_target(loss);
    if (seed == nullptr) return;
    seed[0] += T{1};
    for (std::int64_t i = loss.id_; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.empty()) continue;
      // Intermediate gradients are released once propagated; only leaf
      // gradients survive the pass.
      Buffer<T> g = std::move(n.grad);
      n.grad = Buffer<T>();
      n.backward(*this, g);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    std::string_view op;
    Tensor<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owned(Var<T> v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size())
      throw ContractError("variable does not belong to this tape");
  }

  std::deque<Node> nodes_;  // value() references stay valid as the tape grows
};

}  // namespace sxda
