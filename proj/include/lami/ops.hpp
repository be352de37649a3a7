#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "lami/graph.hpp"

namespace lami {

// Differentiable ops on Graph values. All matrices are 2-D row-major; a
// "row vector" argument is any tensor with one row's worth of entries.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// Adds a bias row to every row of x.
Var add_row(Var x, Var bias);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var l2_normalize_rows(Var x);
Var gather_rows(Var table, std::span<const std::size_t> ids);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var mean_rows(Var x);
Var sum(Var x);
Var mean(Var x);

/// Mean negative log-likelihood over rows whose target is >= 0.
Var cross_entropy(Var logits, std::span<const long> targets);
/// -log softmax(logits)[target] for a single logits row.
Var cross_entropy(Var logits, std::size_t target);

/// Half-open range of key indices visible to one query row.
struct KeySpan {
  std::size_t begin;
  std::size_t end;
};

/// Visibility pattern of an attention call, stored as per-row key spans.
class AttentionMask {
 public:
  explicit AttentionMask(std::size_t keys) : keys_(keys) {}

  /// Lower-triangular mask over n positions.
  static AttentionMask causal(std::size_t n);
  /// `visible` is row-major queries x keys; true = visible.
  static AttentionMask from_dense(std::size_t queries, std::size_t keys,
                                  const std::vector<bool>& visible);

  void add_row(std::initializer_list<KeySpan> spans);
  void add_row(std::span<const KeySpan> spans);

  std::size_t rows() const noexcept { return offsets_.size() - 1; }
  std::size_t keys() const noexcept { return keys_; }
  std::span<const KeySpan> row(std::size_t i) const {
    return std::span<const KeySpan>(spans_).subspan(offsets_[i], offsets_[i + 1] - offsets_[i]);
  }
  bool visible(std::size_t i, std::size_t j) const;

 private:
  std::size_t keys_;
  std::vector<KeySpan> spans_;
  std::vector<std::size_t> offsets_{0};
};

/// Scaled dot-product attention, split into `heads` column groups.
/// Row i of the result is the softmax over visible keys j of (Q_i . K_j)/sqrt(d_head)
/// applied to V. An optional `key_scale` (one nonnegative entry per key)
/// multiplies each key's unnormalized weight; a zero entry hides the key.
Var attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t heads = 1,
              std::optional<Var> key_scale = std::nullopt);

/// Key-scale vector of length mask.size(): gate^2 where `gated[j]`, else 1.
Var gated_key_scale(Var gate, const std::vector<bool>& gated);

}  // namespace lami
