// Reverse-mode differentiation over an explicit tape of recorded operations.
#pragma once

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fcdrn/tensor.hpp"

namespace fcdrn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first accumulation
  bool requires_grad = false;

  void accumulate(const Tensor<T>& g) {
    if (grad.empty()) {
      grad = g;
    } else {
      grad += g;
    }
  }
  /// Zero-initialised grad buffer for in-place accumulation by kernels.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a value that may participate in differentiation. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>(Node<T>{std::move(value), {}, requires_grad})) {}

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Tensor<T>& value() const { return node_->value; }
  [[nodiscard]] Tensor<T>& mutable_value() { return node_->value; }
  [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  [[nodiscard]] bool has_grad() const { return node_ && !node_->grad.empty(); }
  [[nodiscard]] const Tensor<T>& grad() const { return node_->grad; }
  [[nodiscard]] Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (node_) node_->grad = Tensor<T>();
  }
  [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Deep copy with a fresh node.
  [[nodiscard]] Var clone() const { return Var(node_->value, node_->requires_grad); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of operations; backward replays it in reverse.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;
  using BackwardFn = std::function<void(const Tensor<T>& grad_out)>;

  [[nodiscard]] std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  /// True when an op over these inputs must be recorded.
  static bool needs_grad(Tape* tape, std::initializer_list<const Var<T>*> inputs) {
    if (tape == nullptr) return false;
    for (const auto* v : inputs) {
      if (v->requires_grad()) return true;
    }
    return false;
  }

  void record(const Var<T>& output, BackwardFn fn) {
    output.node()->requires_grad = true;
    records_.push_back({output.node(), std::move(fn)});
  }

  /// Seeds d loss / d loss = 1 and propagates to every recorded input.
  void backward(const Var<T>& loss) {
    if (!loss.defined() || loss.value().size() != 1) {
      throw ShapeError("backward: loss must be a scalar tensor");
    }
    const bool recorded = std::any_of(records_.begin(), records_.end(),
                                      [&](const Record& r) { return r.output == loss.node(); });
    if (!recorded) throw Error("backward: loss is detached from the tape");
    loss.node()->accumulate(Tensor<T>(loss.shape(), T{1}));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward(it->output->grad);
    }
    records_.clear();
  }

 private:
  struct Record {
    NodePtr output;
    BackwardFn backward;
  };
  std::vector<Record> records_;
};

}  // namespace fcdrn
