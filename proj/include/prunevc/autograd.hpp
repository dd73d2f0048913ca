#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "prunevc/errors.hpp"
#include "prunevc/tensor.hpp"

namespace prunevc {

template <typename S>
class TapeT;

// One recorded operation result. Nodes live on the tape and are created
// strictly after their parents, so tape order is a topological order.
template <typename S>
struct NodeT {
  TensorT<S> value;
  TensorT<S> grad;  // allocated on first contribution
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<NodeT<S>*> parents;
  std::function<void(NodeT<S>&)> backward_rule;  // empty for leaves
  std::int64_t index = -1;
  const char* op = "";

  void accumulate(const TensorT<S>& g) {
    if (!g.same_shape(value))
      throw ShapeError(std::string("backward(") + op + "): gradient shape " +
                       shape_str(g.shape) + " does not match value shape " +
                       shape_str(value.shape));
    if (!has_grad) {
      grad = TensorT<S>::zeros(value.shape);
      has_grad = true;
    }
    grad.data += g.data;
  }
};

// Cheap handle into the tape; free functions in ops.hpp build expressions
// out of these.
template <typename S>
struct ValueT {
  NodeT<S>* node = nullptr;
  TapeT<S>* tape = nullptr;

  const TensorT<S>& val() const { return node->value; }
  const Shape& shape() const { return node->value.shape; }
  std::int64_t numel() const { return node->value.numel(); }
  bool has_grad() const { return node->has_grad; }
  const TensorT<S>& grad() const {
    if (!node->has_grad)
      throw ShapeError(std::string("grad(") + node->op +
                       "): no gradient accumulated");
    return node->grad;
  }
};

template <typename S>
class TapeT {
 public:
  ValueT<S> leaf(TensorT<S> value, bool requires_grad) {
    return push("leaf", std::move(value), {}, nullptr, requires_grad,
                /*check_finite=*/true);
  }

  ValueT<S> constant(TensorT<S> value) { return leaf(std::move(value), false); }

  ValueT<S> make(const char* op, TensorT<S> value,
                 std::vector<NodeT<S>*> parents,
                 std::function<void(NodeT<S>&)> backward_rule) {
    bool req = false;
    for (auto* p : parents) req = req || p->requires_grad;
    return push(op, std::move(value), std::move(parents),
                std::move(backward_rule), req, true);
  }

  // Backward from a scalar loss. Visits tape nodes in reverse creation
  // order, restricted to nodes reachable from the loss; fan-out gradients
  // accumulate additively. A second call without a fresh tape is an error.
  void backward(const ValueT<S>& loss) {
    if (loss.tape != this)
      throw ShapeError("backward: loss node belongs to a different tape");
    if (!loss.node->value.is_scalar())
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(loss.node->value.shape));
    if (backward_done_)
      throw ShapeError("backward: already run on this tape; build a new tape");
    backward_done_ = true;

    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<NodeT<S>*> stack{loss.node};
    reachable[static_cast<std::size_t>(loss.node->index)] = 1;
    while (!stack.empty()) {
      NodeT<S>* n = stack.back();
      stack.pop_back();
      for (auto* p : n->parents) {
        if (p->index >= n->index)
          throw ShapeError(std::string("backward: cycle detected at op ") +
                           n->op);
        if (!reachable[static_cast<std::size_t>(p->index)]) {
          reachable[static_cast<std::size_t>(p->index)] = 1;
          stack.push_back(p);
        }
      }
    }

    loss.node->accumulate(TensorT<S>::scalar(S(1)));
    for (std::int64_t i = loss.node->index; i >= 0; --i) {
      NodeT<S>& n = nodes_[static_cast<std::size_t>(i)];
      if (!reachable[static_cast<std::size_t>(i)] || !n.has_grad) continue;
      if (n.backward_rule && n.requires_grad) n.backward_rule(n);
    }
  }

  bool backward_done() const { return backward_done_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  ValueT<S> push(const char* op, TensorT<S> value,
                 std::vector<NodeT<S>*> parents,
                 std::function<void(NodeT<S>&)> backward_rule,
                 bool requires_grad, bool check_finite) {
    if (check_finite && !value.all_finite())
      throw NumericFault(std::string("op ") + op +
                         " produced non-finite values, shape " +
                         shape_str(value.shape));
    nodes_.emplace_back();
    NodeT<S>& n = nodes_.back();
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward_rule = std::move(backward_rule);
    n.requires_grad = requires_grad;
    n.index = static_cast<std::int64_t>(nodes_.size()) - 1;
    n.op = op;
    return ValueT<S>{&n, this};
  }

  std::deque<NodeT<S>> nodes_;  // deque: stable addresses
  bool backward_done_ = false;
};

using Tape = TapeT<float>;
using Value = ValueT<float>;

// Mismatched forward/backward pair: the value comes from forward_fn, the
// upstream gradient is transformed by backward_fn regardless of the true
// derivative of forward_fn.
template <typename S>
ValueT<S> custom_grad_op(
    TapeT<S>& tape,
    const std::function<TensorT<S>(const std::vector<const TensorT<S>*>&)>&
        forward_fn,
    std::function<std::vector<TensorT<S>>(
        const TensorT<S>& upstream, const std::vector<const TensorT<S>*>&)>
        backward_fn,
    const std::vector<ValueT<S>>& inputs) {
  std::vector<const TensorT<S>*> in_vals;
  std::vector<NodeT<S>*> parents;
  in_vals.reserve(inputs.size());
  for (const auto& v : inputs) {
    in_vals.push_back(&v.node->value);
    parents.push_back(v.node);
  }
  TensorT<S> out = forward_fn(in_vals);
  return tape.make(
      "custom", std::move(out), std::move(parents),
      [backward_fn = std::move(backward_fn)](NodeT<S>& n) {
        std::vector<const TensorT<S>*> ins;
        ins.reserve(n.parents.size());
        for (auto* p : n.parents) ins.push_back(&p->value);
        std::vector<TensorT<S>> gs = backward_fn(n.grad, ins);
        if (gs.size() != n.parents.size())
          throw ShapeError("custom op: backward produced " +
                           std::to_string(gs.size()) + " gradients for " +
                           std::to_string(n.parents.size()) + " inputs");
        for (std::size_t i = 0; i < gs.size(); ++i) {
          if (!gs[i].same_shape(n.parents[i]->value))
            throw ShapeError(
                "custom op: gradient " + std::to_string(i) + " has shape " +
                shape_str(gs[i].shape) + ", input has " +
                shape_str(n.parents[i]->value.shape));
          if (n.parents[i]->requires_grad) n.parents[i]->accumulate(gs[i]);
        }
      });
}

}  // namespace prunevc
