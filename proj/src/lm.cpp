#include "lami/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lami/distribution.hpp"
#include "lami/errors.hpp"

namespace lami {
namespace {

std::string layer_key(std::size_t layer, const char* suffix) {
  return "layer" + std::to_string(layer) + "." + suffix;
}

void check_context(std::size_t length, const LmConfig& config) {
  if (length > config.context) {
    throw ContextLengthError("sequence of " + std::to_string(length) +
                             " tokens exceeds context length " + std::to_string(config.context));
  }
}

std::vector<long> next_token_targets(const SequenceBatch& batch) {
  std::vector<long> targets(batch.tokens.size(), -1);
  for (std::size_t s = 0; s < batch.count(); ++s)
    for (std::size_t t = batch.offsets[s]; t + 1 < batch.offsets[s + 1]; ++t)
      targets[t] = static_cast<long>(batch.tokens[t + 1]);
  return targets;
}

Var full_forward_logits(const LmGraph& lm, const SequenceBatch& batch) {
  Var h = lm.layers(lm.embed(batch), causal_batch_mask(batch), 0, lm.config().layers);
  return lm.unembed(lm.final_norm(h));
}

}  // namespace

SequenceBatch SequenceBatch::from(std::span<const Tokens> sequences) {
  SequenceBatch b;
  for (const auto& s : sequences) {
    b.tokens.insert(b.tokens.end(), s.begin(), s.end());
    b.offsets.push_back(b.tokens.size());
  }
  return b;
}

AttentionMask causal_batch_mask(const SequenceBatch& batch) {
  AttentionMask mask(batch.tokens.size());
  for (std::size_t s = 0; s < batch.count(); ++s)
    for (std::size_t t = batch.offsets[s]; t < batch.offsets[s + 1]; ++t)
      mask.add_row({KeySpan{batch.offsets[s], t + 1}});
  return mask;
}

LmGraph::LmGraph(Graph& graph, const LmCheckpoint& ckpt, bool trainable)
    : graph_(graph), ckpt_(ckpt), vars_(bind(graph, ckpt.params, trainable)) {}

Var LmGraph::embed(const SequenceBatch& batch) const {
  std::vector<std::size_t> positions;
  positions.reserve(batch.tokens.size());
  for (std::size_t s = 0; s < batch.count(); ++s) {
    check_context(batch.length(s), config());
    for (std::size_t t = 0; t < batch.length(s); ++t) positions.push_back(t);
  }
  for (auto id : batch.tokens) {
    if (id >= config().vocab_size) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return add(gather_rows(vars_.at("tok_emb"), batch.tokens),
             gather_rows(vars_.at("pos_emb"), positions));
}

Var LmGraph::layers(Var x, const AttentionMask& mask, std::size_t from, std::size_t to,
                    std::optional<Var> key_scale) const {
  for (std::size_t l = from; l < to; ++l) {
    auto p = [&](const char* s) { return vars_.at(layer_key(l, s)); };
    Var h = layer_norm(x, p("ln1.gain"), p("ln1.bias"));
    Var att = attention(matmul(h, p("attn.wq")), matmul(h, p("attn.wk")), matmul(h, p("attn.wv")),
                        mask, config().heads, key_scale);
    x = add(x, matmul(att, p("attn.wo")));
    h = layer_norm(x, p("ln2.gain"), p("ln2.bias"));
    h = gelu(add_row(matmul(h, p("mlp.w1")), p("mlp.b1")));
    x = add(x, add_row(matmul(h, p("mlp.w2")), p("mlp.b2")));
  }
  return x;
}

Var LmGraph::final_norm(Var x) const {
  return layer_norm(x, vars_.at("final_ln.gain"), vars_.at("final_ln.bias"));
}

Var LmGraph::unembed(Var hidden) const { return matmul(hidden, vars_.at("unembed")); }

LmCheckpoint init_lm(const LmConfig& config, const Vocabulary& vocab, std::uint64_t seed) {
  if (config.vocab_size != vocab.size()) {
    throw ConfigError("LM vocab_size " + std::to_string(config.vocab_size) +
                      " does not match vocabulary of " + std::to_string(vocab.size()));
  }
  if (config.heads == 0 || config.d_model % config.heads != 0) {
    throw ConfigError("d_model must be divisible by heads");
  }
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model, hid = config.mlp_hidden(), v = config.vocab_size;
  const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = wstd / std::sqrt(2.0 * static_cast<double>(config.layers));
  LmCheckpoint ckpt{config, vocab, {}};
  auto& p = ckpt.params;
  p["tok_emb"] = random_normal({v, d}, 0.02, rng);
  p["pos_emb"] = random_normal({config.context, d}, 0.1, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    p[layer_key(l, "ln1.gain")] = Tensor::filled({d}, 1.0);
    p[layer_key(l, "ln1.bias")] = Tensor::zeros({d});
    p[layer_key(l, "attn.wq")] = random_normal({d, d}, wstd, rng);
    p[layer_key(l, "attn.wk")] = random_normal({d, d}, wstd, rng);
    p[layer_key(l, "attn.wv")] = random_normal({d, d}, wstd, rng);
    p[layer_key(l, "attn.wo")] = random_normal({d, d}, out_std, rng);
    p[layer_key(l, "ln2.gain")] = Tensor::filled({d}, 1.0);
    p[layer_key(l, "ln2.bias")] = Tensor::zeros({d});
    p[layer_key(l, "mlp.w1")] = random_normal({d, hid}, wstd, rng);
    p[layer_key(l, "mlp.b1")] = Tensor::zeros({hid});
    p[layer_key(l, "mlp.w2")] = random_normal({hid, d}, out_std * 0.5, rng);
    p[layer_key(l, "mlp.b2")] = Tensor::zeros({d});
  }
  p["final_ln.gain"] = Tensor::filled({d}, 1.0);
  p["final_ln.bias"] = Tensor::zeros({d});
  p["unembed"] = random_normal({d, v}, wstd, rng);
  return ckpt;
}

TextStates lm_forward(std::span<const TokenId> tokens, const LmCheckpoint& ckpt) {
  if (tokens.empty()) throw ArgumentError("lm_forward on an empty sequence");
  check_context(tokens.size(), ckpt.config);
  Graph g;
  LmGraph lm(g, ckpt, false);
  const Tokens seq(tokens.begin(), tokens.end());
  const auto batch = SequenceBatch::from(std::span<const Tokens>(&seq, 1));
  Var h = lm.final_norm(lm.layers(lm.embed(batch), causal_batch_mask(batch), 0, ckpt.config.layers));
  return TextStates{h.value(), lm.unembed(h).value()};
}

double sequence_loss(std::span<const Tokens> sequences, const LmCheckpoint& ckpt) {
  double total = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < sequences.size(); start += kChunk) {
    const auto part = sequences.subspan(start, std::min(kChunk, sequences.size() - start));
    const auto batch = SequenceBatch::from(part);
    const auto targets = next_token_targets(batch);
    const std::size_t n = static_cast<std::size_t>(
        std::count_if(targets.begin(), targets.end(), [](long t) { return t >= 0; }));
    if (n == 0) continue;
    Graph g;
    LmGraph lm(g, ckpt, false);
    total += cross_entropy(full_forward_logits(lm, batch), targets).value().item() *
             static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw ArgumentError("sequence_loss: no next-token targets");
  return total / static_cast<double>(count);
}

LmCheckpoint train_lm(const Vocabulary& vocab, std::span<const Tokens> corpus,
                      const LmConfig& config_in, const LmTrainConfig& train, std::uint64_t seed,
                      LmTrainReport* report) {
  std::vector<Tokens> usable;
  for (const auto& s : corpus) {
    if (s.size() < 2) continue;
    usable.push_back(s.size() > config_in.context ? Tokens(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(config_in.context)) : s);
  }
  if (usable.empty()) throw ArgumentError("train_lm: corpus has no sequence with a next token");
  LmConfig config = config_in;
  config.vocab_size = vocab.size();
  LmCheckpoint ckpt = init_lm(config, vocab, seed);

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(usable.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Tokens> train_set, val_set;
  if (usable.size() < 10) {
    train_set = usable;
    val_set = usable;
  } else {
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(train.validation_fraction * usable.size())));
    for (std::size_t i = 0; i < order.size(); ++i)
      (i < n_val ? val_set : train_set).push_back(usable[order[i]]);
  }

  AdamW opt({.weight_decay = train.weight_decay});
  std::vector<std::size_t> perm(train_set.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = perm.size();
  double last_loss = 0.0;
  for (std::size_t step = 0; step < train.steps; ++step) {
    std::vector<Tokens> batch_seqs;
    for (std::size_t b = 0; b < train.batch; ++b) {
      if (cursor == perm.size()) {
        std::shuffle(perm.begin(), perm.end(), rng);
        cursor = 0;
      }
      batch_seqs.push_back(train_set[perm[cursor++]]);
    }
    std::map<std::string, Tensor> grads;
    try {
      Graph g;
      LmGraph lm(g, ckpt, true);
      const auto batch = SequenceBatch::from(batch_seqs);
      Var loss = cross_entropy(full_forward_logits(lm, batch), next_token_targets(batch));
      last_loss = loss.value().item();
      if (!std::isfinite(last_loss)) throw NumericError("loss is not finite");
      auto gr = g.backward(loss);
      for (const auto& [name, v] : lm.vars()) grads.emplace(name, gr[v]);
    } catch (const NumericError& e) {
      throw TrainingError(step, e.what());
    }
    opt.step(ckpt.params, grads, cosine_lr(train.lr, step, train.steps));
  }

  if (report) {
    report->final_train_loss = last_loss;
    report->validation_loss = sequence_loss(val_set, ckpt);
    std::vector<double> counts(vocab.size(), 0.0);
    double total = 0.0;
    for (const auto& s : train_set)
      for (std::size_t t = 1; t < s.size(); ++t) {
        counts[s[t]] += 1.0;
        total += 1.0;
      }
    double h = 0.0;
    for (double c : counts)
      if (c > 0) h -= (c / total) * std::log(c / total);
    report->unigram_entropy = h;
    report->train_sequences = train_set.size();
    report->validation_sequences = val_set.size();
  }
  return ckpt;
}

std::vector<double> score_candidates(std::string_view prompt,
                                     std::span<const std::string> candidates,
                                     const LmCheckpoint& ckpt) {
  if (candidates.size() < 2) throw ArgumentError("score_candidates needs at least 2 candidates");
  const Tokens prefix = tokenize(prompt, ckpt.vocab);
  std::vector<Tokens> seqs;
  std::vector<std::size_t> cand_len;
  for (const auto& c : candidates) {
    const Tokens ct = encode_words(c, ckpt.vocab);
    if (ct.empty()) throw ArgumentError("empty candidate");
    Tokens s = prefix;
    s.insert(s.end(), ct.begin(), ct.end());
    check_context(s.size(), ckpt.config);
    seqs.push_back(std::move(s));
    cand_len.push_back(ct.size());
  }
  const auto batch = SequenceBatch::from(seqs);
  Graph g;
  LmGraph lm(g, ckpt, false);
  const Tensor logits = full_forward_logits(lm, batch).value();
  std::vector<double> scores;
  for (std::size_t c = 0; c < seqs.size(); ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < cand_len[c]; ++i) {
      const std::size_t pos = batch.offsets[c] + prefix.size() - 1 + i;
      const auto lp = log_softmax(logits.row(pos));
      total += lp[seqs[c][prefix.size() + i]];
    }
    scores.push_back(total / static_cast<double>(cand_len[c]));
  }
  return scores;
}

Completion sample(std::string_view prompt, double temperature, std::uint64_t seed,
                  std::size_t max_tokens, const LmCheckpoint& ckpt) {
  if (temperature < 0.0) throw ArgumentError("sampling temperature must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tokens seq = tokenize(prompt, ckpt.vocab);
  check_context(seq.size(), ckpt.config);
  const bool has_stop = ckpt.vocab.contains(".");
  const TokenId stop = ckpt.vocab.id(".");
  Completion out;
  double logprob_total = 0.0;
  while (out.tokens.size() < max_tokens && seq.size() < ckpt.config.context) {
    const TextStates st = lm_forward(seq, ckpt);
    const auto last = st.logits.row(st.logits.rows() - 1);
    const auto lp = log_softmax(last);
    TokenId next = 0;
    if (temperature == 0.0) {
      next = static_cast<TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
    } else {
      const Distribution p = softmax(last, temperature);
      const double u = unit(rng);
      double acc = 0.0;
      next = p.size() - 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
          next = i;
          break;
        }
      }
    }
    logprob_total += lp[next];
    out.tokens.push_back(next);
    seq.push_back(next);
    if (has_stop && next == stop) break;
  }
  out.text = detokenize(out.tokens, ckpt.vocab);
  out.mean_logprob = out.tokens.empty() ? 0.0 : logprob_total / static_cast<double>(out.tokens.size());
  return out;
}

}  // namespace lami
