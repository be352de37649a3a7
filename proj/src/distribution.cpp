#include "lami/distribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "lami/errors.hpp"

namespace lami {

Distribution::Distribution(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw ArgumentError("distribution over an empty vocabulary");
  double total = 0.0;
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (!std::isfinite(probs_[i]) || probs_[i] < 0.0) {
      throw ArgumentError("distribution entry " + std::to_string(i) + " is " +
                          std::to_string(probs_[i]));
    }
    total += probs_[i];
  }
  if (std::abs(total - 1.0) > kSumTolerance) {
    throw ArgumentError("distribution sums to " + std::to_string(total));
  }
}

double Distribution::entropy() const {
  double h = 0.0;
  for (double p : probs_)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

std::size_t Distribution::argmax() const {
  return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) -
                                  probs_.begin());
}

bool Distribution::bit_equal(const Distribution& other) const noexcept {
  return probs_.size() == other.probs_.size() &&
         std::memcmp(probs_.data(), other.probs_.data(), probs_.size() * sizeof(double)) == 0;
}

Distribution softmax(std::span<const double> logits, double temperature) {
  if (logits.empty()) throw ArgumentError("softmax of an empty vector");
  if (!(temperature > 0.0)) throw ArgumentError("softmax temperature must be positive");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return Distribution(std::move(p));
}

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw ArgumentError("log_softmax of an empty vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[i] - mx - lz;
  return out;
}

double total_variation(const Distribution& a, const Distribution& b) {
  if (a.size() != b.size()) throw DimensionError("total_variation size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

}  // namespace lami
