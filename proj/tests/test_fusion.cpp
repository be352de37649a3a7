#include <doctest.h>

#include <cmath>
#include <random>

#include "lami/distribution.hpp"
#include "lami/errors.hpp"
#include "lami/fusion.hpp"

using namespace lami;

namespace {

struct Setup {
  WorldSpec world;
  Corpora corpora;
  LmCheckpoint lm;
  DualEncoderCheckpoint vision;
};

const Setup& untrained() {
  static const Setup s = [] {
    Setup r;
    r.world = build_world(0, 64);
    r.corpora = emit_corpora(r.world, 0.25, 0);
    auto vocab = Vocabulary::build(r.corpora.lm_corpus);
    LmConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_model = 16;
    c.context = 40;
    c.vocab_size = vocab.size();
    r.lm = init_lm(c, vocab, 5);
    std::vector<std::string> caps;
    for (const auto& p : r.corpora.paired_set) caps.push_back(p.caption);
    DualEncoderConfig dc;
    dc.d_v = 8;
    r.vision = init_dual_encoder(dc, Vocabulary::build(caps), 6);
    return r;
  }();
  return s;
}

FusionConfig small_config() {
  FusionConfig c;
  c.hidden = 12;
  return c;
}

// Opens the visual pathway with random weights.
FusionParams random_fusion(Placement p, std::size_t d_v, std::size_t d_x, std::uint64_t seed) {
  auto fp = init_fusion(p, d_v, d_x, small_config(), seed);
  std::mt19937_64 rng(seed + 100);
  if (p == Placement::early) {
    fp.params["prefix.gate"] = Tensor::filled({1}, 0.8);
  } else {
    fp.params["lfal.wv_vis"] = random_normal({d_x, d_x}, 0.5, rng);
    fp.params["lfal.wo"] = random_normal({d_x, d_x}, 0.5, rng);
  }
  return fp;
}

Tensor random_zv(std::size_t d_v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_normal({kNumPatches, d_v}, 1.0, rng);
}

double max_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tokens random_prompt(const Vocabulary& vocab, std::size_t len, std::mt19937_64& rng) {
  Tokens t{Vocabulary::kBos};
  for (std::size_t i = 1; i < len; ++i) t.push_back(static_cast<TokenId>(3 + rng() % (vocab.size() - 3)));
  return t;
}

}  // namespace

TEST_CASE("placement names") {
  for (auto p : kPlacements) CHECK(parse_placement(placement_name(p)) == p);
  CHECK_THROWS_AS(parse_placement("middle"), ConfigError);
  LmConfig c;
  c.layers = 4;
  CHECK(intermediate_layer(c) == 2);
  c.layers = 5;
  CHECK(intermediate_layer(c) == 3);
}

TEST_CASE("vtp shapes and zero input") {
  const auto fp = init_fusion(Placement::late, 32, 64, FusionConfig{}, 1);
  CHECK(fp.params.at("vtp.w2").shape() == Shape{32, 128});
  CHECK(fp.params.at("vtp.w1").shape() == Shape{128, 64});
  const Tensor u = vtp_forward(Tensor::zeros({16, 32}), fp);
  CHECK(u.shape() == Shape{16, 64});
  for (std::size_t r = 1; r < 16; ++r)
    for (std::size_t c = 0; c < 64; ++c) CHECK(u.at(r, c) == u.at(0, c));
  // gelu(0) = 0
  for (double x : u.data()) CHECK(x == 0.0);
  CHECK_THROWS_AS(vtp_forward(Tensor::zeros({16, 31}), fp), DimensionError);
}

TEST_CASE("vtp gradient matches finite differences") {
  std::mt19937_64 rng(3);
  NamedTensors p;
  p["vtp.w2"] = random_normal({6, 8}, 0.5, rng);
  p["vtp.w1"] = random_normal({8, 5}, 0.5, rng);
  const Tensor zv = random_normal({4, 6}, 1.0, rng);
  const auto res = gradient_check(p, [&](Graph& g, const BoundVars& fv) {
    Var u = fusion_graph::vtp(g.constant(zv), fv);
    return matmul(matmul(g.constant(Tensor::filled({1, 4}, 1.0)), u), g.constant(Tensor::filled({5, 1}, 1.0)));
  });
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("lfal matches a scalar attention oracle with one visual token") {
  const std::size_t d = 4;
  auto vocab = Vocabulary::build(std::vector<std::string>{"a b c d e"});
  LmConfig c;
  c.layers = 1;
  c.heads = 1;
  c.d_model = d;
  c.context = 8;
  c.vocab_size = vocab.size();
  const auto lm = init_lm(c, vocab, 2);
  const auto fp = random_fusion(Placement::late, 3, d, 9);
  std::mt19937_64 rng(4);
  const Tensor uv = random_normal({1, d}, 1.0, rng);
  const Tensor zx = random_normal({3, d}, 1.0, rng);
  const Tensor got = lfal_forward(uv, zx, fp, lm);

  auto vecmat = [](const std::vector<double>& x, const Tensor& w) {
    std::vector<double> y(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.cols(); ++j)
      for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w.at(i, j);
    return y;
  };
  auto row = [](const Tensor& t, std::size_t r) {
    auto s = t.row(r);
    return std::vector<double>(s.begin(), s.end());
  };
  const auto& P = fp.params;
  for (std::size_t t = 0; t < 3; ++t) {
    const auto q = vecmat(row(zx, t), P.at("lfal.wq"));
    std::vector<std::vector<double>> keys{vecmat(row(uv, 0), P.at("lfal.wk"))};
    std::vector<std::vector<double>> vals{vecmat(row(uv, 0), P.at("lfal.wv_vis"))};
    for (std::size_t s = 0; s <= t; ++s) {
      keys.push_back(vecmat(row(zx, s), P.at("lfal.wk")));
      vals.push_back(vecmat(row(zx, s), P.at("lfal.wv")));
    }
    std::vector<double> score;
    for (const auto& k : keys) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += q[i] * k[i];
      score.push_back(dot / std::sqrt(static_cast<double>(d)));
    }
    double mx = score[0], z = 0.0;
    for (double s : score) mx = std::max(mx, s);
    for (double& s : score) z += (s = std::exp(s - mx));
    std::vector<double> mix(d, 0.0);
    for (std::size_t j = 0; j < keys.size(); ++j)
      for (std::size_t i = 0; i < d; ++i) mix[i] += score[j] / z * vals[j][i];
    auto fused = row(zx, t);
    const auto delta = vecmat(mix, P.at("lfal.wo"));
    for (std::size_t i = 0; i < d; ++i) fused[i] += delta[i];
    const auto logits = vecmat(fused, lm.params.at("unembed"));
    for (std::size_t v = 0; v < logits.size(); ++v) CHECK(got.at(t, v) == doctest::Approx(logits[v]).epsilon(1e-12));
  }
}

TEST_CASE("fresh late and intermediate params reproduce the frozen LM") {
  const auto& s = untrained();
  std::mt19937_64 rng(8);
  for (auto p : {Placement::late, Placement::intermediate}) {
    const auto fp = init_fusion(p, 8, 16, small_config(), 21);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const auto tokens = random_prompt(s.lm.vocab, 2 + rng() % 20, rng);
      const Tensor uv = vtp_forward(random_zv(8, rng()), fp);
      worst = std::max(worst, max_diff(fuse_forward(fp, uv, tokens, s.lm), lm_forward(tokens, s.lm).logits));
    }
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("closed visual pathway reproduces the frozen LM in every placement") {
  const auto& s = untrained();
  std::mt19937_64 rng(10);
  for (auto p : kPlacements) {
    auto fp = random_fusion(p, 8, 16, 31);
    zero_visual_pathway(fp);
    for (int trial = 0; trial < 20; ++trial) {
      const auto tokens = random_prompt(s.lm.vocab, 2 + rng() % 20, rng);
      const Tensor uv = vtp_forward(random_zv(8, rng()), fp);
      CHECK(max_diff(fuse_forward(fp, uv, tokens, s.lm), lm_forward(tokens, s.lm).logits) < 1e-6);
    }
  }
}

TEST_CASE("causality holds with visual tokens present") {
  const auto& s = untrained();
  std::mt19937_64 rng(12);
  for (auto p : kPlacements) {
    const auto fp = random_fusion(p, 8, 16, 41);
    const Tensor uv = vtp_forward(random_zv(8, 77), fp);
    auto tokens = random_prompt(s.lm.vocab, 12, rng);
    const Tensor base = fuse_forward(fp, uv, tokens, s.lm);
    for (std::size_t t = 1; t < tokens.size(); ++t) {
      auto changed = tokens;
      changed[t] = static_cast<TokenId>(3 + (changed[t] - 3 + 1) % (s.lm.vocab.size() - 3));
      const Tensor out = fuse_forward(fp, uv, changed, s.lm);
      bool prefix_same = true, row_changed = false;
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t v = 0; v < out.cols(); ++v) prefix_same = prefix_same && out.at(r, v) == base.at(r, v);
      for (std::size_t v = 0; v < out.cols(); ++v) row_changed = row_changed || out.at(t, v) != base.at(t, v);
      CHECK(prefix_same);
      CHECK(row_changed);
    }
  }
}

TEST_CASE("early fusion row bookkeeping") {
  const auto& s = untrained();
  const auto fp = random_fusion(Placement::early, 8, 16, 51);
  const Tensor uv = vtp_forward(random_zv(8, 1), fp);
  std::mt19937_64 rng(2);
  const auto tokens = random_prompt(s.lm.vocab, 9, rng);
  const Tensor out = fuse_forward(fp, uv, tokens, s.lm);
  CHECK(out.rows() == tokens.size());
  CHECK(out.cols() == s.lm.vocab.size());
  // the prefix fills 16 of the 40 positions
  CHECK_NOTHROW(fuse_forward(fp, uv, random_prompt(s.lm.vocab, 24, rng), s.lm));
  CHECK_THROWS_AS(fuse_forward(fp, uv, random_prompt(s.lm.vocab, 25, rng), s.lm), ContextLengthError);
  // late placement has no prefix, so the full context is available
  const auto late = random_fusion(Placement::late, 8, 16, 51);
  CHECK_NOTHROW(fuse_forward(late, vtp_forward(random_zv(8, 1), late), random_prompt(s.lm.vocab, 40, rng), s.lm));
}

TEST_CASE("late and early pathways differ") {
  const auto& s = untrained();
  const auto late = random_fusion(Placement::late, 8, 16, 61);
  auto early = random_fusion(Placement::early, 8, 16, 61);
  const Tensor zv = random_zv(8, 3);
  std::mt19937_64 rng(4);
  const auto tokens = random_prompt(s.lm.vocab, 10, rng);
  const Tensor a = fuse_forward(late, vtp_forward(zv, late), tokens, s.lm);
  const Tensor b = fuse_forward(early, vtp_forward(zv, early), tokens, s.lm);
  CHECK(max_diff(a, b) > 1e-3);
}

TEST_CASE("fuse_images equals per-image forwards") {
  const auto& s = untrained();
  std::mt19937_64 rng(14);
  for (auto p : kPlacements) {
    const auto fp = random_fusion(p, 8, 16, 71);
    const auto tokens = random_prompt(s.lm.vocab, 8, rng);
    const std::vector<Tensor> zvs = {random_zv(8, 1), random_zv(8, 2), random_zv(8, 3)};
    const auto all = fuse_images(fp, tokens, zvs, s.lm);
    REQUIRE(all.size() == 3);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(max_diff(all[i], fuse_forward(fp, vtp_forward(zvs[i], fp), tokens, s.lm)) < 1e-12);
  }
}

TEST_CASE("d_x mismatch is a config error") {
  const auto& s = untrained();
  const auto fp = init_fusion(Placement::late, 8, 24, small_config(), 1);
  const Tokens tokens{Vocabulary::kBos, 5, 6};
  CHECK_THROWS_AS(fuse_forward(fp, Tensor::zeros({16, 24}), tokens, s.lm), ConfigError);
  CHECK_THROWS_AS(lfal_forward(Tensor::zeros({16, 24}), Tensor::zeros({3, 24}), fp, s.lm), ConfigError);
  const auto early = init_fusion(Placement::early, 8, 16, small_config(), 1);
  CHECK_THROWS_AS(lfal_forward(Tensor::zeros({16, 16}), Tensor::zeros({3, 16}), early, s.lm), ConfigError);
}

TEST_CASE("training leaves frozen models untouched, is deterministic and reaches every tensor") {
  const auto& s = untrained();
  FusionConfig cfg = small_config();
  cfg.stage1_steps = 2;
  cfg.stage2_steps = 0;
  cfg.batch = 4;
  const std::span<const PairedExample> pairs(s.corpora.paired_set.data(), 64);
  for (auto p : kPlacements) {
    CAPTURE(placement_name(p));
    const auto lm_hash = s.lm.hash(), vision_hash = s.vision.hash();
    FusionTrainReport rep;
    const auto a = train_fusion(s.lm, s.vision, pairs, p, cfg, 5, &rep);
    const auto b = train_fusion(s.lm, s.vision, pairs, p, cfg, 5);
    CHECK(a.hash() == b.hash());
    CHECK(rep.lm_hash_before == lm_hash);
    CHECK(rep.lm_hash_after == lm_hash);
    CHECK(rep.vision_hash_before == vision_hash);
    CHECK(rep.vision_hash_after == vision_hash);
    CHECK(s.lm.hash() == lm_hash);
    CHECK(rep.last_grad_norms.size() == a.params.size());
    for (const auto& [name, norm] : rep.last_grad_norms) {
      CAPTURE(name);
      CHECK(norm > 0.0);
    }
    const auto c = train_fusion(s.lm, s.vision, pairs, p, cfg, 6);
    CHECK(c.hash() != a.hash());
  }
}

TEST_CASE("fusion overfits 32 image-dependent captions") {
  const auto& s = untrained();
  std::vector<Tokens> corpus;
  for (const auto& line : s.corpora.lm_corpus) corpus.push_back(tokenize(line, s.lm.vocab));
  LmConfig lc;
  lc.layers = 2;
  lc.heads = 2;
  lc.d_model = 32;
  lc.context = 40;
  LmTrainConfig tc;
  tc.steps = 400;
  tc.lr = 2e-3;
  const auto lm = train_lm(s.lm.vocab, corpus, lc, tc, 1);
  // colour questions about unnamed objects: size, shape and colour words all come from the image
  std::vector<PairedExample> pairs;
  for (const auto& p : s.corpora.paired_set)
    if (p.caption.rfind("what is the color of the small", 0) == 0 || p.caption.rfind("what is the color of the large", 0) == 0)
      if (pairs.size() < 32) pairs.push_back(p);
  REQUIRE(pairs.size() == 32);
  FusionConfig fc;
  fc.stage1_steps = 600;
  fc.stage1_lr = 3e-3;
  fc.stage2_steps = 0;
  const auto fp = train_fusion(lm, s.vision, pairs, Placement::late, fc, 1);
  const double fused = fused_caption_loss(fp, lm, s.vision, pairs);
  auto closed = fp;
  zero_visual_pathway(closed);
  CHECK(fused < 0.1);
  CHECK(fused_caption_loss(closed, lm, s.vision, pairs) > 0.3);
  const auto attr = attribute_token_loss(fp, lm, s.vision, pairs);
  CHECK(attr.tokens == 96);
  CHECK(attr.fused < attr.text_only);
}
