#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lami/ops.hpp"
#include "lami/params.hpp"
#include "lami/vocab.hpp"

namespace lami {

struct LmConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t context = 48;
  std::size_t vocab_size = 0;

  std::size_t mlp_hidden() const noexcept { return 4 * d_model; }
};

/// Frozen causal transformer: config, vocabulary and named weights.
struct LmCheckpoint {
  LmConfig config;
  Vocabulary vocab;
  NamedTensors params;

  std::uint64_t hash() const { return hash_tensors(params); }
};

/// Final hidden states (after the last layer norm) and next-token logits.
struct TextStates {
  Tensor hidden;  // n x d_model
  Tensor logits;  // n x vocab
};

/// Several token sequences laid out back to back as matrix rows.
struct SequenceBatch {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> offsets{0};

  static SequenceBatch from(std::span<const Tokens> sequences);
  std::size_t count() const noexcept { return offsets.size() - 1; }
  std::size_t length(std::size_t s) const noexcept { return offsets[s + 1] - offsets[s]; }
};

/// Causal attention within each sequence of the batch, nothing across.
AttentionMask causal_batch_mask(const SequenceBatch& batch);

/// The LM's weights bound into one Graph, with the pieces of the forward
/// pass exposed separately so fusion variants can splice into them.
class LmGraph {
 public:
  LmGraph(Graph& graph, const LmCheckpoint& ckpt, bool trainable);

  /// Token plus positional embeddings; positions restart at 0 in each sequence.
  Var embed(const SequenceBatch& batch) const;
  /// Applies layers [from, to).
  Var layers(Var x, const AttentionMask& mask, std::size_t from, std::size_t to,
             std::optional<Var> key_scale = std::nullopt) const;
  Var final_norm(Var x) const;
  Var unembed(Var hidden) const;

  const BoundVars& vars() const noexcept { return vars_; }
  const LmConfig& config() const noexcept { return ckpt_.config; }
  Graph& graph() const noexcept { return graph_; }

 private:
  Graph& graph_;
  const LmCheckpoint& ckpt_;
  BoundVars vars_;
};

LmCheckpoint init_lm(const LmConfig& config, const Vocabulary& vocab, std::uint64_t seed);

/// Single-sequence forward pass.
TextStates lm_forward(std::span<const TokenId> tokens, const LmCheckpoint& ckpt);

struct LmTrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 16;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double validation_fraction = 0.1;
};

struct LmTrainReport {
  double final_train_loss = 0.0;
  double validation_loss = 0.0;
  double unigram_entropy = 0.0;
  std::size_t train_sequences = 0;
  std::size_t validation_sequences = 0;
};

/// Trains from scratch with AdamW and cosine decay. Corpora under ten
/// sequences are used whole for both training and validation.
LmCheckpoint train_lm(const Vocabulary& vocab, std::span<const Tokens> corpus,
                      const LmConfig& config, const LmTrainConfig& train, std::uint64_t seed,
                      LmTrainReport* report = nullptr);

/// Mean next-token negative log-likelihood over every position of every sequence.
double sequence_loss(std::span<const Tokens> sequences, const LmCheckpoint& ckpt);

/// Mean log-probability of each candidate's tokens, conditioned on the prompt.
std::vector<double> score_candidates(std::string_view prompt,
                                     std::span<const std::string> candidates,
                                     const LmCheckpoint& ckpt);

struct Completion {
  Tokens tokens;
  std::string text;
  /// Mean log-probability of the generated tokens under softmax(logits).
  double mean_logprob = 0.0;
};

/// Temperature 0 decodes greedily; otherwise samples from softmax(logits / T).
/// Stops after max_tokens, after emitting ".", or at the context limit.
Completion sample(std::string_view prompt, double temperature, std::uint64_t seed,
                  std::size_t max_tokens, const LmCheckpoint& ckpt);

}  // namespace lami
