#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lami/tensor.hpp"

namespace lami {

class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid while the
/// Graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// What a node's gradient rule sees during the backward sweep.
class BackwardContext {
 public:
  const Tensor& grad() const { return grad_; }
  const Tensor& output() const;
  const Tensor& input(std::size_t i) const;
  bool needs(std::size_t i) const;
  /// Gradient buffer of input i, zero-filled on first access; rules add into it.
  std::span<double> input_grad(std::size_t i);

 private:
  friend class Graph;
  BackwardContext(Graph& graph, std::size_t node, const Tensor& grad)
      : graph_(graph), node_(node), grad_(grad) {}

  Graph& graph_;
  std::size_t node_;
  const Tensor& grad_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Leaf gradients produced by Graph::backward.
class Gradients {
 public:
  /// Gradient of a leaf that requires grad; zeros when the loss never touched it.
  const Tensor& operator[](Var leaf) const;

 private:
  friend class Graph;
  std::vector<std::optional<Tensor>> grads_;
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order; backward walks it once in reverse.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Input whose requires_grad flag is taken from the tensor.
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  /// Records an op result. The rule is dropped when no input requires grad.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn rule);

  Gradients backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend class Var;
  friend class BackwardContext;

  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn rule;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  std::deque<Node> nodes_;
  std::vector<std::optional<Tensor>>* grads_ = nullptr;
};

}  // namespace lami
