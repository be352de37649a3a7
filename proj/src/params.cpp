#include "lami/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

namespace lami {
namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv(std::uint64_t& h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

}  // namespace

BoundVars bind(Graph& graph, const NamedTensors& params, bool trainable) {
  BoundVars out;
  for (const auto& [name, t] : params) {
    Tensor copy = t;
    copy.set_requires_grad(trainable);
    out.emplace(name, graph.leaf(std::move(copy)));
  }
  return out;
}

std::uint64_t hash_tensors(const NamedTensors& params) {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, t] : params) {
    fnv(h, name.data(), name.size());
    for (auto e : t.shape()) {
      const std::uint64_t v = e;
      fnv(h, &v, sizeof v);
    }
    fnv(h, t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

void AdamW::step(NamedTensors& params, const std::map<std::string, Tensor>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    auto g = it->second.data();
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != p.size()) {
      m = Tensor::zeros(p.shape());
      v = Tensor::zeros(p.shape());
    }
    auto md = m.mutable_data();
    auto vd = v.mutable_data();
    auto pd = p.mutable_data();
    const double decay = p.rank() == 2 ? cfg_.weight_decay : 0.0;
    for (std::size_t i = 0; i < pd.size(); ++i) {
      md[i] = cfg_.beta1 * md[i] + (1.0 - cfg_.beta1) * g[i];
      vd[i] = cfg_.beta2 * vd[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = md[i] / bc1;
      const double vhat = vd[i] / bc2;
      pd[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + decay * pd[i]);
    }
  }
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

GradCheckResult gradient_check(const NamedTensors& params, const LossBuilder& loss, double h) {
  std::map<std::string, Tensor> analytic;
  {
    Graph g;
    auto vars = bind(g, params, true);
    Var l = loss(g, vars);
    auto grads = g.backward(l);
    for (const auto& [name, v] : vars) analytic.emplace(name, grads[v]);
  }
  auto eval = [&](const NamedTensors& p) {
    Graph g;
    auto vars = bind(g, p, false);
    return loss(g, vars).value().item();
  };

  GradCheckResult result;
  NamedTensors work = params;
  for (auto& [name, t] : work) {
    const Tensor& a = analytic.at(name);
    double worst_diff = 0.0, scale_max = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t.mutable_data()[i] = orig + h;
      const double up = eval(work);
      t.mutable_data()[i] = orig - h;
      const double down = eval(work);
      t.mutable_data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      worst_diff = std::max(worst_diff, std::abs(numeric - a[i]));
      scale_max = std::max({scale_max, std::abs(numeric), std::abs(a[i])});
    }
    const double rel = scale_max > 0.0 ? worst_diff / scale_max : 0.0;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = name;
    }
  }
  return result;
}

}  // namespace lami
