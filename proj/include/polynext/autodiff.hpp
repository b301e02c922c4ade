#pragma once

#include <functional>
#include <deque>
#include <unordered_map>
#include <vector>

#include "polynext/tensor.hpp"

namespace polynext {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// kCalibrate normalizes like inference but refreshes the running buffers
/// from the observed batch statistics (fixed-point statistic estimation for
/// untrained batch-norm variants).
enum class Mode { kTrain, kInfer, kCalibrate };

using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

/// Reverse-mode record of executed operations. Nodes are appended in
/// execution order, so input ids always precede their consumers. backward()
/// walks nodes in decreasing id order and accumulates gradients in that fixed
/// order, which makes results bit-reproducible.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Leaf bound to a parameter tensor; repeated calls with the same tensor
  /// return the same node so gradient contributions accumulate in one slot.
  Var param(Tensor& p);

  /// Generic op node. `backward` receives the output gradient and must
  /// accumulate into the inputs via accumulate(). Pass an empty function for
  /// ops with no differentiable inputs.
  Var make_node(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and back-propagates. Loss must be scalar.
  void backward(Var loss);

  bool has_grad(Var v) const;
  const Tensor& grad(Var v) const;
  /// Gradient of a bound parameter after backward(); null if the parameter
  /// never influenced the loss.
  const Tensor* grad_for(const Tensor& p) const;

  void accumulate(Var v, const Tensor& delta);
  void accumulate_move(Var v, Tensor&& delta);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<int32_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_var(Var v) const;

  std::deque<Node> nodes_;  // deque: stable element references across push_back
  std::vector<Tensor> grads_;
  std::vector<char> grad_present_;
  std::unordered_map<const Tensor*, int32_t> bound_params_;
};

}  // namespace polynext
