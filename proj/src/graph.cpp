#include "lami/graph.hpp"

#include "lami/errors.hpp"

namespace lami {

const Tensor& Var::value() const { return graph_->nodes_[id_].value; }

bool Var::requires_grad() const { return graph_->nodes_[id_].requires_grad; }

const Tensor& BackwardContext::output() const { return graph_.nodes_[node_].value; }

const Tensor& BackwardContext::input(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs[i]].value;
}

bool BackwardContext::needs(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs[i]].requires_grad;
}

std::span<double> BackwardContext::input_grad(std::size_t i) {
  const std::size_t id = graph_.nodes_[node_].inputs[i];
  auto& slot = (*graph_.grads_)[id];
  if (!slot) slot = Tensor::zeros(graph_.nodes_[id].value.shape());
  return slot->mutable_data();
}

const Tensor& Gradients::operator[](Var leaf) const {
  if (leaf.id() >= grads_.size() || !grads_[leaf.id()]) {
    throw ArgumentError("no gradient recorded for node " + std::to_string(leaf.id()) +
                        " (not a leaf requiring grad)");
  }
  return *grads_[leaf.id()];
}

Var Graph::leaf(Tensor value) {
  const bool rg = value.requires_grad();
  nodes_.push_back(Node{std::move(value), {}, {}, rg, true});
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, true});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn rule) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.graph_ != this) throw ArgumentError(std::string(op) + ": input from another graph");
    node.inputs.push_back(in.id_);
    node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (node.requires_grad) node.rule = std::move(rule);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Graph::backward(Var loss) {
  if (loss.graph_ != this) throw ArgumentError("backward: loss from another graph");
  if (loss.value().size() != 1) {
    throw ArgumentError("backward needs a scalar loss, got shape " +
                        shape_str(loss.value().shape()));
  }
  Gradients out;
  out.grads_.resize(nodes_.size());
  grads_ = &out.grads_;
  if (nodes_[loss.id_].requires_grad) {
    out.grads_[loss.id_] = Tensor::filled(loss.value().shape(), 1.0);
  }
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.is_leaf || !node.requires_grad || !out.grads_[id]) continue;
    Tensor upstream = std::move(*out.grads_[id]);
    out.grads_[id].reset();
    BackwardContext ctx(*this, id, upstream);
    node.rule(ctx);
  }
  grads_ = nullptr;
  // Leaves that need a gradient but were never reached get zeros.
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].is_leaf && nodes_[id].requires_grad && !out.grads_[id]) {
      out.grads_[id] = Tensor::zeros(nodes_[id].value.shape());
    }
  }
  return out;
}

}  // namespace lami
