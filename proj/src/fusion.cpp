#include "lami/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lami/distribution.hpp"
#include "lami/errors.hpp"

namespace lami {
namespace {

std::vector<long> caption_targets(const SequenceBatch& batch) {
  std::vector<long> targets(batch.tokens.size(), -1);
  for (std::size_t s = 0; s < batch.count(); ++s)
    for (std::size_t t = batch.offsets[s]; t + 1 < batch.offsets[s + 1]; ++t)
      targets[t] = static_cast<long>(batch.tokens[t + 1]);
  return targets;
}

void check_dims(const FusionParams& params, const LmCheckpoint& lm) {
  if (params.d_x() != lm.config.d_model) {
    throw ConfigError("fusion d_x " + std::to_string(params.d_x()) + " does not match LM d_model " +
                      std::to_string(lm.config.d_model));
  }
}

Var stack(Graph& g, std::span<const Tensor> parts) {
  std::vector<Var> vars;
  vars.reserve(parts.size());
  for (const auto& t : parts) vars.push_back(g.constant(t));
  return vars.size() == 1 ? vars[0] : concat_rows(vars);
}

bool is_attribute_word(const std::string& w) {
  for (auto kind : kAttrKinds)
    if (attr_value_of(kind, w)) return true;
  return false;
}

struct CachedPair {
  Tokens tokens;
  Tensor zv;
  Tensor states;  // late: z^x; intermediate: residual stream after the first half
};

Tokens caption_tokens(const std::string& caption, const LmCheckpoint& lm, std::size_t reserve) {
  Tokens t = tokenize(caption, lm.vocab);
  const std::size_t limit = lm.config.context - reserve;
  if (t.size() > limit) t.resize(limit);
  return t;
}

}  // namespace

std::string_view placement_name(Placement p) {
  switch (p) {
    case Placement::early: return "early";
    case Placement::intermediate: return "intermediate";
    default: return "late";
  }
}

Placement parse_placement(std::string_view name) {
  for (auto p : kPlacements)
    if (placement_name(p) == name) return p;
  throw ConfigError("unknown fusion placement '" + std::string(name) + "'");
}

FusionParams init_fusion(Placement placement, std::size_t d_v, std::size_t d_x, const FusionConfig& config,
                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  FusionParams fp;
  fp.placement = placement;
  auto& p = fp.params;
  p["vtp.w2"] = random_normal({d_v, config.hidden}, 1.0 / std::sqrt(static_cast<double>(d_v)), rng);
  p["vtp.w1"] = random_normal({config.hidden, d_x}, 1.0 / std::sqrt(static_cast<double>(config.hidden)), rng);
  if (placement == Placement::early) {
    p["prefix.gate"] = Tensor::filled({1}, 1.0);
  } else {
    const double s = 1.0 / std::sqrt(static_cast<double>(d_x));
    p["lfal.wq"] = random_normal({d_x, d_x}, s, rng);
    p["lfal.wk"] = random_normal({d_x, d_x}, s, rng);
    p["lfal.wv"] = random_normal({d_x, d_x}, s, rng);
    p["lfal.wv_vis"] = Tensor::zeros({d_x, d_x});
    p["lfal.wo"] = Tensor::zeros({d_x, d_x});
  }
  return fp;
}

void zero_visual_pathway(FusionParams& params) {
  if (params.placement == Placement::early) {
    params.params["prefix.gate"] = Tensor::zeros({1});
  } else {
    const auto d = params.d_x();
    params.params["lfal.wv_vis"] = Tensor::zeros({d, d});
    params.params["lfal.wo"] = Tensor::zeros({d, d});
  }
}

std::size_t intermediate_layer(const LmConfig& config) { return (config.layers + 1) / 2; }

namespace fusion_graph {

AttentionMask visual_text_mask(const SequenceBatch& batch, std::size_t n_v) {
  const std::size_t u = batch.count() * n_v;
  AttentionMask mask(u + batch.tokens.size());
  for (std::size_t s = 0; s < batch.count(); ++s)
    for (std::size_t t = batch.offsets[s]; t < batch.offsets[s + 1]; ++t)
      mask.add_row({KeySpan{s * n_v, (s + 1) * n_v}, KeySpan{u + batch.offsets[s], u + t + 1}});
  return mask;
}

Var vtp(Var zv, const BoundVars& fv) { return matmul(gelu(matmul(zv, fv.at("vtp.w2"))), fv.at("vtp.w1")); }

Var lfal_block(Var states, Var uv, const SequenceBatch& batch, std::size_t n_v, const BoundVars& fv) {
  const std::array<Var, 2> keys = {matmul(uv, fv.at("lfal.wk")), matmul(states, fv.at("lfal.wk"))};
  const std::array<Var, 2> values = {matmul(uv, fv.at("lfal.wv_vis")), matmul(states, fv.at("lfal.wv"))};
  Var att = attention(matmul(states, fv.at("lfal.wq")), concat_rows(keys), concat_rows(values),
                      visual_text_mask(batch, n_v));
  return add(states, matmul(att, fv.at("lfal.wo")));
}

Var forward(const LmGraph& lm, const BoundVars& fv, Placement placement, const SequenceBatch& batch,
            Var uv) {
  const auto& cfg = lm.config();
  if (uv.shape().size() != 2 || uv.shape()[0] % batch.count() != 0) {
    throw DimensionError("u^v rows " + shape_str(uv.shape()) + " do not split over " +
                         std::to_string(batch.count()) + " sequences");
  }
  const std::size_t n_v = uv.shape()[0] / batch.count();
  switch (placement) {
    case Placement::late: {
      Var h = lm.final_norm(lm.layers(lm.embed(batch), causal_batch_mask(batch), 0, cfg.layers));
      return lm.unembed(lfal_block(h, uv, batch, n_v, fv));
    }
    case Placement::intermediate: {
      const auto mid = intermediate_layer(cfg);
      const auto causal = causal_batch_mask(batch);
      Var h = lm.layers(lm.embed(batch), causal, 0, mid);
      h = lfal_block(h, uv, batch, n_v, fv);
      return lm.unembed(lm.final_norm(lm.layers(h, causal, mid, cfg.layers)));
    }
    default: {
      for (std::size_t s = 0; s < batch.count(); ++s) {
        if (batch.length(s) + n_v > cfg.context) {
          throw ContextLengthError("prefix of " + std::to_string(n_v) + " plus " + std::to_string(batch.length(s)) +
                                   " tokens exceeds context length " + std::to_string(cfg.context));
        }
      }
      const std::size_t u = batch.count() * n_v;
      AttentionMask mask(u + batch.tokens.size());
      for (std::size_t s = 0; s < batch.count(); ++s)
        for (std::size_t i = 0; i < n_v; ++i)
          mask.add_row({KeySpan{s * n_v, (s + 1) * n_v}, KeySpan{u + batch.offsets[s], u + batch.offsets[s] + 1}});
      for (std::size_t s = 0; s < batch.count(); ++s)
        for (std::size_t t = batch.offsets[s]; t < batch.offsets[s + 1]; ++t)
          mask.add_row({KeySpan{s * n_v, (s + 1) * n_v}, KeySpan{u + batch.offsets[s], u + t + 1}});
      std::vector<bool> gated(u + batch.tokens.size(), false);
      std::fill(gated.begin(), gated.begin() + static_cast<std::ptrdiff_t>(u), true);
      const std::array<Var, 2> rows = {uv, lm.embed(batch)};
      Var h = lm.layers(concat_rows(rows), mask, 0, cfg.layers, gated_key_scale(fv.at("prefix.gate"), gated));
      return lm.unembed(lm.final_norm(slice_rows(h, u, u + batch.tokens.size())));
    }
  }
}

}  // namespace fusion_graph

Tensor vtp_forward(const Tensor& zv, const FusionParams& params) {
  if (zv.rank() != 2 || zv.cols() != params.d_v()) {
    throw DimensionError("z^v " + shape_str(zv.shape()) + " does not match VTP input width " +
                         std::to_string(params.d_v()));
  }
  Graph g;
  return fusion_graph::vtp(g.constant(zv), lami::bind(g, params.params, false)).value();
}

Tensor lfal_forward(const Tensor& uv, const Tensor& zx, const FusionParams& params, const LmCheckpoint& lm) {
  check_dims(params, lm);
  if (params.placement == Placement::early) throw ConfigError("lfal_forward needs late or intermediate params");
  if (uv.cols() != params.d_x() || zx.cols() != params.d_x()) {
    throw DimensionError("u^v " + shape_str(uv.shape()) + " / z^x " + shape_str(zx.shape()) +
                         " do not match d_x " + std::to_string(params.d_x()));
  }
  Graph g;
  auto fv = lami::bind(g, params.params, false);
  SequenceBatch batch;
  batch.tokens.assign(zx.rows(), 0);
  batch.offsets.push_back(zx.rows());
  Var fused = fusion_graph::lfal_block(g.constant(zx), g.constant(uv), batch, uv.rows(), fv);
  return matmul(fused, g.constant(lm.params.at("unembed"))).value();
}

Tensor fuse_forward(const FusionParams& params, const Tensor& uv, std::span<const TokenId> tokens,
                    const LmCheckpoint& lm) {
  check_dims(params, lm);
  if (uv.cols() != params.d_x()) throw DimensionError("u^v width does not match d_x");
  Graph g;
  LmGraph lg(g, lm, false);
  auto fv = lami::bind(g, params.params, false);
  const Tokens seq(tokens.begin(), tokens.end());
  const auto batch = SequenceBatch::from(std::span<const Tokens>(&seq, 1));
  return fusion_graph::forward(lg, fv, params.placement, batch, g.constant(uv)).value();
}

std::vector<Tensor> fuse_images(const FusionParams& params, std::span<const TokenId> tokens,
                                std::span<const Tensor> zvs, const LmCheckpoint& lm) {
  check_dims(params, lm);
  if (zvs.empty()) return {};
  for (const auto& z : zvs)
    if (z.cols() != params.d_v()) throw DimensionError("z^v width does not match d_v");
  Graph g;
  LmGraph lg(g, lm, false);
  auto fv = lami::bind(g, params.params, false);
  const Tokens seq(tokens.begin(), tokens.end());
  const std::vector<Tokens> copies(zvs.size(), seq);
  const auto batch = SequenceBatch::from(copies);
  const Tensor logits =
      fusion_graph::forward(lg, fv, params.placement, batch, fusion_graph::vtp(stack(g, zvs), fv)).value();
  std::vector<Tensor> out;
  const std::size_t n = seq.size(), v = logits.cols();
  for (std::size_t i = 0; i < zvs.size(); ++i) {
    Tensor t = Tensor::zeros({n, v});
    std::copy_n(logits.data().begin() + static_cast<std::ptrdiff_t>(i * n * v), n * v, t.mutable_data().begin());
    out.push_back(std::move(t));
  }
  return out;
}

FusionParams train_fusion(const LmCheckpoint& lm, const DualEncoderCheckpoint& vision,
                          std::span<const PairedExample> pairs, Placement placement, const FusionConfig& config,
                          std::uint64_t seed, FusionTrainReport* report) {
  if (pairs.empty()) throw ArgumentError("train_fusion needs paired examples");
  const auto lm_before = lm.hash(), vision_before = vision.hash();
  FusionParams fp = init_fusion(placement, vision.config.d_v, lm.config.d_model, config, seed);
  check_dims(fp, lm);

  const std::size_t reserve = placement == Placement::early ? kNumPatches : 0;
  const auto mid = intermediate_layer(lm.config);
  std::vector<CachedPair> cache;
  cache.reserve(pairs.size());
  for (const auto& p : pairs) {
    CachedPair c{caption_tokens(p.caption, lm, reserve), encode_image(p.image, vision), Tensor()};
    if (c.tokens.size() < 2) continue;
    if (placement == Placement::late) {
      c.states = lm_forward(c.tokens, lm).hidden;
    } else if (placement == Placement::intermediate) {
      Graph g;
      LmGraph lg(g, lm, false);
      const auto batch = SequenceBatch::from(std::span<const Tokens>(&c.tokens, 1));
      c.states = lg.layers(lg.embed(batch), causal_batch_mask(batch), 0, mid).value();
    }
    cache.push_back(std::move(c));
  }
  if (cache.empty()) throw ArgumentError("train_fusion: no caption has a next token");

  std::mt19937_64 rng(seed ^ 0xf00dULL);
  std::vector<std::size_t> perm(cache.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = perm.size();
  AdamW opt({.weight_decay = config.weight_decay});
  const std::size_t total = config.stage1_steps + config.stage2_steps;
  double last = 0.0;
  for (std::size_t step = 0; step < total; ++step) {
    const bool first = step < config.stage1_steps;
    if (step == config.stage1_steps && report) report->stage1_final_loss = last;
    std::vector<const CachedPair*> items;
    for (std::size_t i = 0; i < std::min(config.batch, cache.size()); ++i) {
      if (cursor == perm.size()) {
        std::shuffle(perm.begin(), perm.end(), rng);
        cursor = 0;
      }
      items.push_back(&cache[perm[cursor++]]);
    }
    std::vector<Tokens> seqs;
    std::vector<Tensor> zvs, states;
    for (auto* c : items) {
      seqs.push_back(c->tokens);
      zvs.push_back(c->zv);
      if (placement != Placement::early) states.push_back(c->states);
    }
    const auto batch = SequenceBatch::from(seqs);
    std::map<std::string, Tensor> grads;
    try {
      Graph g;
      LmGraph lg(g, lm, false);
      auto fv = lami::bind(g, fp.params, true);
      Var uv = fusion_graph::vtp(stack(g, zvs), fv);
      Var logits;
      if (placement == Placement::late) {
        logits = lg.unembed(fusion_graph::lfal_block(stack(g, states), uv, batch, kNumPatches, fv));
      } else if (placement == Placement::intermediate) {
        Var h = fusion_graph::lfal_block(stack(g, states), uv, batch, kNumPatches, fv);
        logits = lg.unembed(lg.final_norm(lg.layers(h, causal_batch_mask(batch), mid, lm.config.layers)));
      } else {
        logits = fusion_graph::forward(lg, fv, placement, batch, uv);
      }
      Var loss = cross_entropy(logits, caption_targets(batch));
      last = loss.value().item();
      auto gr = g.backward(loss);
      for (const auto& [name, v] : fv) grads.emplace(name, gr[v]);
      if (report && step + 1 == total) {
        for (const auto& [name, t] : grads) {
          double ss = 0.0;
          for (double x : t.data()) ss += x * x;
          report->last_grad_norms[name] = std::sqrt(ss);
        }
      }
    } catch (const NumericError& e) {
      throw TrainingError(step, e.what());
    }
    opt.step(fp.params, grads, first ? config.stage1_lr : config.stage2_lr);
  }
  if (report) {
    if (config.stage2_steps == 0) report->stage1_final_loss = last;
    report->stage2_final_loss = last;
    report->lm_hash_before = lm_before;
    report->lm_hash_after = lm.hash();
    report->vision_hash_before = vision_before;
    report->vision_hash_after = vision.hash();
  }
  return fp;
}

namespace {

template <class Fn>
void for_each_chunk(const FusionParams& params, const LmCheckpoint& lm, const DualEncoderCheckpoint& vision,
                    std::span<const PairedExample> pairs, Fn&& fn) {
  const std::size_t reserve = params.placement == Placement::early ? kNumPatches : 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    std::vector<Tokens> seqs;
    std::vector<Tensor> zvs;
    for (std::size_t i = start; i < std::min(pairs.size(), start + kChunk); ++i) {
      auto t = caption_tokens(pairs[i].caption, lm, reserve);
      if (t.size() < 2) continue;
      seqs.push_back(std::move(t));
      zvs.push_back(encode_image(pairs[i].image, vision));
    }
    if (seqs.empty()) continue;
    const auto batch = SequenceBatch::from(seqs);
    Graph g;
    LmGraph lg(g, lm, false);
    auto fv = lami::bind(g, params.params, false);
    const Tensor fused =
        fusion_graph::forward(lg, fv, params.placement, batch, fusion_graph::vtp(stack(g, zvs), fv)).value();
    const Tensor plain = lg.unembed(lg.final_norm(lg.layers(lg.embed(batch), causal_batch_mask(batch), 0,
                                                            lm.config.layers)))
                             .value();
    fn(batch, fused, plain);
  }
}

}  // namespace

AttributeLoss attribute_token_loss(const FusionParams& params, const LmCheckpoint& lm,
                                   const DualEncoderCheckpoint& vision, std::span<const PairedExample> pairs) {
  check_dims(params, lm);
  AttributeLoss out;
  for_each_chunk(params, lm, vision, pairs, [&](const SequenceBatch& batch, const Tensor& fused, const Tensor& plain) {
    const auto targets = caption_targets(batch);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] < 0 || !is_attribute_word(lm.vocab.word(static_cast<TokenId>(targets[r])))) continue;
      out.fused -= log_softmax(fused.row(r))[static_cast<std::size_t>(targets[r])];
      out.text_only -= log_softmax(plain.row(r))[static_cast<std::size_t>(targets[r])];
      ++out.tokens;
    }
  });
  if (out.tokens == 0) throw ArgumentError("no attribute tokens in the captions");
  out.fused /= static_cast<double>(out.tokens);
  out.text_only /= static_cast<double>(out.tokens);
  return out;
}

double fused_caption_loss(const FusionParams& params, const LmCheckpoint& lm, const DualEncoderCheckpoint& vision,
                          std::span<const PairedExample> pairs) {
  check_dims(params, lm);
  double total = 0.0;
  std::size_t count = 0;
  for_each_chunk(params, lm, vision, pairs, [&](const SequenceBatch& batch, const Tensor& fused, const Tensor&) {
    const auto targets = caption_targets(batch);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] < 0) continue;
      total -= log_softmax(fused.row(r))[static_cast<std::size_t>(targets[r])];
      ++count;
    }
  });
  if (count == 0) throw ArgumentError("no caption targets");
  return total / static_cast<double>(count);
}

}  // namespace lami
