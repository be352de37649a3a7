#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "lami/graph.hpp"

namespace lami {

/// Named parameter tensors; ordered so iteration and hashing are stable.
using NamedTensors = std::map<std::string, Tensor>;
using BoundVars = std::map<std::string, Var>;

/// Binds every tensor as a graph leaf. `trainable` overrides each tensor's
/// requires_grad flag.
BoundVars bind(Graph& graph, const NamedTensors& params, bool trainable);

/// FNV-1a over names, shapes and payload bits.
std::uint64_t hash_tensors(const NamedTensors& params);

Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay, applied to rank-2 tensors only.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Updates every parameter that has an entry in `grads`.
  void step(NamedTensors& params, const std::map<std::string, Tensor>& grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamWConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// Cosine decay from `base` to 0 over `total` steps.
double cosine_lr(double base, std::size_t step, std::size_t total);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
};

using LossBuilder = std::function<Var(Graph&, const BoundVars&)>;

/// Compares backward() against central finite differences for every entry of
/// every parameter. The relative error of a tensor is
/// max|analytic - numeric| / max(max|analytic|, max|numeric|).
GradCheckResult gradient_check(const NamedTensors& params, const LossBuilder& loss, double h = 1e-5);

}  // namespace lami
