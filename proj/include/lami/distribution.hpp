#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace lami {

/// Probability vector over the vocabulary. Construction validates that every
/// entry is finite and nonnegative and that the entries sum to 1 within 1e-9.
class Distribution {
 public:
  static constexpr double kSumTolerance = 1e-9;

  Distribution() = default;
  explicit Distribution(std::vector<double> probs);

  std::span<const double> probs() const noexcept { return probs_; }
  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const noexcept { return probs_[i]; }

  /// Shannon entropy in nats, with 0 log 0 = 0.
  double entropy() const;
  /// Index of the largest entry; ties resolve to the lowest index.
  std::size_t argmax() const;
  bool bit_equal(const Distribution& other) const noexcept;

 private:
  std::vector<double> probs_;
};

/// Max-subtracted softmax of logits / temperature.
Distribution softmax(std::span<const double> logits, double temperature = 1.0);

/// log softmax(logits)[i] for every i, max-subtracted.
std::vector<double> log_softmax(std::span<const double> logits);

/// Half the L1 distance.
double total_variation(const Distribution& a, const Distribution& b);

}  // namespace lami
