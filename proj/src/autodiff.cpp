#include "polynext/autodiff.hpp"

namespace polynext {

void Tape::check_var(Var v) const {
  check(v.id >= 0 && v.id < static_cast<int32_t>(nodes_.size()),
        "tape: invalid node id " + std::to_string(v.id));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::param(Tensor& p) {
  auto it = bound_params_.find(&p);
  if (it != bound_params_.end()) return Var{it->second};
  Var v = leaf(p, true);
  bound_params_.emplace(&p, v.id);
  return v;
}

Var Tape::make_node(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (Var in : inputs) {
    check_var(in);
    n.inputs.push_back(in.id);
    if (nodes_[static_cast<size_t>(in.id)].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  check_var(v);
  return nodes_[static_cast<size_t>(v.id)].value;
}

bool Tape::requires_grad(Var v) const {
  check_var(v);
  return nodes_[static_cast<size_t>(v.id)].requires_grad;
}

void Tape::backward(Var loss) {
  check_var(loss);
  check(value(loss).numel() == 1, "backward: loss must be scalar, got shape " + shape_str(shape(loss)));
  grads_.assign(nodes_.size(), Tensor());
  grad_present_.assign(nodes_.size(), 0);
  accumulate(loss, Tensor(shape(loss), 1.0));
  for (int32_t id = loss.id; id >= 0; --id) {
    size_t i = static_cast<size_t>(id);
    if (!grad_present_[i] || !nodes_[i].requires_grad) continue;
    if (nodes_[i].backward) nodes_[i].backward(*this, grads_[i]);
  }
}

bool Tape::has_grad(Var v) const {
  check_var(v);
  return !grad_present_.empty() && grad_present_[static_cast<size_t>(v.id)] != 0;
}

const Tensor& Tape::grad(Var v) const {
  check(has_grad(v), "tape: no gradient recorded for node " + std::to_string(v.id));
  return grads_[static_cast<size_t>(v.id)];
}

const Tensor* Tape::grad_for(const Tensor& p) const {
  auto it = bound_params_.find(&p);
  if (it == bound_params_.end()) return nullptr;
  Var v{it->second};
  if (!has_grad(v)) return nullptr;
  return &grads_[static_cast<size_t>(v.id)];
}

void Tape::accumulate(Var v, const Tensor& delta) {
  check_var(v);
  size_t i = static_cast<size_t>(v.id);
  check(delta.same_shape(value(v)), "tape: gradient shape " + shape_str(delta.shape()) +
                                        " does not match value shape " + shape_str(shape(v)));
  if (!grad_present_[i]) {
    grads_[i] = delta;
    grad_present_[i] = 1;
  } else {
    grads_[i] += delta;
  }
}

void Tape::accumulate_move(Var v, Tensor&& delta) {
  check_var(v);
  size_t i = static_cast<size_t>(v.id);
  check(delta.same_shape(value(v)), "tape: gradient shape " + shape_str(delta.shape()) +
                                        " does not match value shape " + shape_str(shape(v)));
  if (!grad_present_[i]) {
    grads_[i] = std::move(delta);
    grad_present_[i] = 1;
  } else {
    grads_[i] += delta;
  }
}

}  // namespace polynext
