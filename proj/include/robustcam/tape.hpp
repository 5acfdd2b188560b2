#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "robustcam/errors.hpp"
#include "robustcam/tensor.hpp"

namespace robustcam {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape is alive.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t index = 0;

  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Records a forward pass as an append-only list of nodes. Nodes are stored in
// creation order, which is a topological order: an operation can only take
// inputs that already exist. Recorded values are never modified after
// creation, so backward() may be called any number of times.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;

  // grad_inputs[i] is null when input i needs no gradient. Implementations
  // accumulate (+=) into the non-null entries.
  using BackwardFn = std::function<void(const Tape& tape, const TensorT& grad_out,
                                        std::span<TensorT* const> grad_inputs)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose gradient can be requested (parameters, inputs).
  Var<T> variable(TensorT value) { return push(std::move(value), {}, {}, true); }

  // Leaf excluded from differentiation (labels, fixed masks).
  Var<T> constant(TensorT value) { return push(std::move(value), {}, {}, false); }

  Var<T> record(TensorT value, std::vector<Var<T>> inputs, BackwardFn backward) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const auto& v : inputs) {
      check_owned(v);
      ids.push_back(v.index);
      needs = needs || nodes_[v.index].requires_grad;
    }
    return push(std::move(value), std::move(ids), std::move(backward), needs);
  }

  const TensorT& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.index].value;
  }

  const TensorT& value_at(std::size_t index) const { return nodes_.at(index).value; }

  bool requires_grad(Var<T> v) const {
    check_owned(v);
    return nodes_[v.index].requires_grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // d(loss)/d(t) for every t in wrt, in the same order. Tensors that do not
  // influence the loss receive zeros of their own shape.
  std::vector<TensorT> backward(Var<T> loss, std::span<const Var<T>> wrt) const {
    check_owned(loss);
    for (const auto& v : wrt) check_owned(v);
    const auto& loss_value = nodes_[loss.index].value;
    if (loss_value.size() != 1 || loss_value.rank() > 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " +
                       to_string(loss_value.shape()));
    }

    std::vector<std::optional<TensorT>> grads(loss.index + 1);
    grads[loss.index] = TensorT(loss_value.shape(), T{1});

    std::vector<TensorT*> input_grads;
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!grads[i] || !node.backward) continue;
      input_grads.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        std::size_t in = node.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (!grads[in]) grads[in].emplace(nodes_[in].value.shape(), T{});
        input_grads[k] = &*grads[in];
      }
      node.backward(*this, *grads[i], input_grads);
    }

    std::vector<TensorT> out;
    out.reserve(wrt.size());
    for (const auto& v : wrt) {
      if (v.index < grads.size() && grads[v.index]) {
        out.push_back(*grads[v.index]);
      } else {
        out.emplace_back(nodes_[v.index].value.shape(), T{});
      }
    }
    return out;
  }

  TensorT gradient(Var<T> loss, Var<T> wrt) const {
    Var<T> one[] = {wrt};
    return std::move(backward(loss, one).front());
  }

 private:
  struct Node {
    TensorT value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var<T> push(TensorT value, std::vector<std::size_t> inputs, BackwardFn backward,
              bool requires_grad) {
    nodes_.push_back(Node{std::move(value), std::move(inputs),
                          requires_grad ? std::move(backward) : BackwardFn{},
                          requires_grad});
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owned(const Var<T>& v) const {
    if (v.tape != this || v.index >= nodes_.size()) {
      throw ShapeError("variable is not tracked by this tape");
    }
  }

  std::vector<Node> nodes_;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
  if (tape == nullptr) throw ShapeError("variable is not tracked by any tape");
  return tape->value(*this);
}

}  // namespace robustcam
