#include "mmsbr/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace mmsbr {

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

namespace diff {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) { return record("constant", std::move(value), {}, nullptr); }

Var Tape::variable(Tensor value, std::string name) {
  Var v = record(name.empty() ? "variable" : name, std::move(value), {}, nullptr);
  nodes_[v.id].requires_grad = true;
  return v;
}

Var Tape::record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  if (check_finite_ && !value.all_finite()) {
    throw std::runtime_error("non-finite value produced by op '" + std::string(op) + "' at node " +
                             std::to_string(nodes_.size()));
  }
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) throw std::logic_error("tape input refers to a future node");
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::accum(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to a different tape");
  const Tensor& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + lv.shape_string());
  }
  for (Node& n : nodes_) n.grad = Tensor();
  accum(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

}  // namespace diff
}  // namespace mmsbr
