#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

#include "lami/errors.hpp"
#include "lami/infer.hpp"

using namespace lami;

namespace {

struct Frac {
  long long n = 0, d = 1;
  static Frac make(long long n, long long d) {
    const long long g = std::gcd(n, d);
    return {n / g, d / g};
  }
  Frac operator+(Frac o) const { return make(n * o.d + o.n * d, d * o.d); }
  Frac operator-(Frac o) const { return make(n * o.d - o.n * d, d * o.d); }
  Frac operator*(Frac o) const { return make(n * o.n, d * o.d); }
  Frac operator/(Frac o) const { return make(n * o.d, d * o.n); }
  bool operator==(const Frac&) const = default;
};

Distribution random_dist(std::size_t v, std::mt19937_64& rng, double sharpness = 3.0) {
  std::normal_distribution<double> nd(0.0, sharpness);
  std::vector<double> logits(v);
  for (double& x : logits) x = nd(rng);
  return softmax(logits);
}

PredictionBundle random_bundle(std::size_t v, std::size_t k, std::mt19937_64& rng) {
  PredictionBundle b;
  b.p0 = random_dist(v, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < k; ++i) b.images.push_back({i, random_dist(v, rng), u(rng), ImageSample{}});
  return b;
}

struct Fixture {
  WorldSpec world;
  LmCheckpoint lm;
  DualEncoderCheckpoint vision;
  FusionParams fusion;
  Models models() const { return {&lm, &vision, &fusion, &world, Calibration{-0.5, 0.5}}; }
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture r;
    r.world = build_world(0, 32);
    const auto corpora = emit_corpora(r.world, 0.25, 0);
    auto vocab = Vocabulary::build(corpora.lm_corpus);
    LmConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_model = 16;
    c.context = 40;
    c.vocab_size = vocab.size();
    r.lm = init_lm(c, vocab, 5);
    std::vector<std::string> caps;
    for (const auto& p : corpora.paired_set) caps.push_back(p.caption);
    DualEncoderConfig dc;
    dc.d_v = 8;
    dc.joint = 8;
    r.vision = init_dual_encoder(dc, Vocabulary::build(caps), 6);
    FusionConfig fc;
    fc.hidden = 12;
    r.fusion = init_fusion(Placement::late, 8, 16, fc, 7);
    std::mt19937_64 rng(8);
    r.fusion.params["lfal.wv_vis"] = random_normal({16, 16}, 0.5, rng);
    r.fusion.params["lfal.wo"] = random_normal({16, 16}, 0.5, rng);
    return r;
  }();
  return f;
}

std::string color_prompt(const WorldSpec& w, std::size_t obj) {
  return "What is the color of the " + w.objects[obj].name + "? It is";
}

}  // namespace

TEST_CASE("strategy and alignment names") {
  for (auto s : kStrategies) CHECK(parse_strategy(strategy_name(s)) == s);
  CHECK_THROWS_AS(parse_strategy("vote"), ConfigError);
  CHECK(parse_alignment_mode("oracle") == AlignmentMode::oracle);
  CHECK(parse_alignment_mode("learned") == AlignmentMode::learned);
  CHECK_THROWS_AS(parse_alignment_mode("clip"), ConfigError);
}

TEST_CASE("inference config validation") {
  InferenceConfig c;
  CHECK_NOTHROW(c.validate());
  c.k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.k = 2;
  c.strategy = Strategy::single_image;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.k = 1;
  CHECK_NOTHROW(c.validate());
  c.epsilon = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.epsilon = 0.0;
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("clip fusion hand case against exact rationals") {
  PredictionBundle b;
  b.p0 = Distribution({0.5, 0.3, 0.2});
  b.images.push_back({0, Distribution({0.1, 0.8, 0.1}), 1.0, ImageSample{}});
  b.images.push_back({1, Distribution({0.2, 0.2, 0.6}), 0.5, ImageSample{}});
  const auto got = aggregate(b, Strategy::clip_fusion);

  const std::array<Frac, 3> p0 = {Frac::make(5, 10), Frac::make(3, 10), Frac::make(2, 10)};
  const std::array<Frac, 3> p1 = {Frac::make(1, 10), Frac::make(8, 10), Frac::make(1, 10)};
  const std::array<Frac, 3> p2 = {Frac::make(2, 10), Frac::make(2, 10), Frac::make(6, 10)};
  const std::array<Frac, 2> f = {Frac::make(1, 1), Frac::make(1, 2)};
  const Frac one = Frac::make(1, 1), k = Frac::make(2, 1);
  const std::array<Frac, 3> expect = {Frac::make(9, 40), Frac::make(21, 40), Frac::make(1, 4)};
  for (std::size_t j = 0; j < 3; ++j) {
    // per-image mixture, averaged
    const Frac exact = ((f[0] * p1[j] + (one - f[0]) * p0[j]) + (f[1] * p2[j] + (one - f[1]) * p0[j])) / k;
    CHECK(exact == expect[j]);
    const double target = static_cast<double>(exact.n) / static_cast<double>(exact.d);
    CHECK(std::abs(got[j] - target) <= 2e-16);
  }
  CHECK(got.argmax() == 1);
}

TEST_CASE("clip fusion endpoints are bit exact") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    auto b = random_bundle(2 + rng() % 40, 1 + rng() % 10, rng);
    for (auto& e : b.images) e.f = 0.0;
    CHECK(aggregate(b, Strategy::clip_fusion).bit_equal(b.p0));
    for (auto& e : b.images) e.f = 1.0;
    CHECK(aggregate(b, Strategy::clip_fusion).bit_equal(aggregate(b, Strategy::average_logits)));
  }
  auto b = random_bundle(7, 1, rng);
  b.images[0].f = 1.0;
  CHECK(aggregate(b, Strategy::clip_fusion).bit_equal(b.images[0].p));
}

TEST_CASE("every strategy yields a distribution and clip fusion stays near p0") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    auto b = random_bundle(2 + rng() % 30, 1 + rng() % 8, rng);
    for (auto s : kStrategies) {
      const auto p = aggregate(b, s);
      double sum = 0.0;
      for (double x : p.probs()) {
        CHECK(x >= 0.0);
        sum += x;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    double mean_f = 0.0;
    for (const auto& e : b.images) mean_f += e.f / static_cast<double>(b.images.size());
    CHECK(total_variation(aggregate(b, Strategy::clip_fusion), b.p0) <= mean_f + 1e-9);
  }
}

TEST_CASE("aggregation ignores storage order") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto b = random_bundle(12, 6, rng);
    auto shuffled = b;
    std::shuffle(shuffled.images.begin(), shuffled.images.end(), rng);
    for (auto s : kStrategies) CHECK(aggregate(b, s).bit_equal(aggregate(shuffled, s)));
  }
}

TEST_CASE("selection strategies") {
  PredictionBundle b;
  b.p0 = Distribution({0.25, 0.25, 0.25, 0.25});
  b.images.push_back({2, Distribution({0.7, 0.1, 0.1, 0.1}), 0.3, ImageSample{}});
  b.images.push_back({0, Distribution({0.4, 0.2, 0.2, 0.2}), 0.3, ImageSample{}});
  b.images.push_back({1, Distribution({0.1, 0.7, 0.1, 0.1}), 0.3, ImageSample{}});
  CHECK(aggregate(b, Strategy::single_image).bit_equal(b.images[1].p));
  // images 2 and 1 tie on entropy; index 1 wins
  CHECK(aggregate(b, Strategy::max_confidence).bit_equal(b.images[2].p));
  CHECK(aggregate(b, Strategy::text_only).bit_equal(b.p0));
  PredictionBundle empty;
  empty.p0 = b.p0;
  CHECK_THROWS_AS(aggregate(empty, Strategy::average_logits), ArgumentError);
  CHECK(aggregate(empty, Strategy::text_only).bit_equal(b.p0));
}

TEST_CASE("entropy weighting") {
  PredictionBundle b;
  b.p0 = Distribution({0.5, 0.5});
  b.images.push_back({0, Distribution({0.9, 0.1}), 1.0, ImageSample{}});
  const double h0 = std::log(2.0), h1 = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  for (double tau : {1.0, 0.25}) {
    const double w0 = std::exp(-h0 / tau), w1 = std::exp(-h1 / tau);
    const auto p = aggregate(b, Strategy::entropy_weighted, tau);
    CHECK(p[0] == doctest::Approx((w0 * 0.5 + w1 * 0.9) / (w0 + w1)).epsilon(1e-12));
  }
  // equal entropies: plain average over p0 and the images
  b.images[0].p = Distribution({0.5, 0.5});
  CHECK(aggregate(b, Strategy::entropy_weighted)[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("image generation") {
  const auto& fx = fixture();
  const auto prompt = color_prompt(fx.world, 3);
  const auto imgs = generate_images(prompt, 6, 100, 0.0, fx.world);
  REQUIRE(imgs.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(imgs[i].meta == fx.world.objects[3].attrs);
    CHECK(imgs[i].seed == 100 + i);
  }
  const auto again = generate_images(prompt, 6, 100, 0.0, fx.world);
  for (std::size_t i = 0; i < 6; ++i) CHECK(again[i].pixels == imgs[i].pixels);
  CHECK_THROWS_AS(generate_images("what is the color of the sky ?", 2, 0, 0.0, fx.world), GenerationError);

  // eps = 0.25: per attribute, 1.5 of 6 images corrupted on average
  std::array<double, 3> corrupted{};
  const int queries = 1000;
  for (int q = 0; q < queries; ++q) {
    for (const auto& im : generate_images(color_prompt(fx.world, q % 32), 6, 7919ULL * q, 0.25, fx.world))
      for (auto kind : kAttrKinds)
        corrupted[static_cast<std::size_t>(kind)] += im.meta.get(kind) != im.requested.get(kind) ? 1.0 : 0.0;
  }
  for (double c : corrupted) CHECK(c / queries == doctest::Approx(1.5).epsilon(0.1));
}

TEST_CASE("per-image distributions") {
  const auto& fx = fixture();
  const auto models = fx.models();
  const auto prompt = color_prompt(fx.world, 5);
  const auto images = generate_images(prompt, 4, 9, 0.0, fx.world);
  const auto b = predict_distributions(prompt, images, models, AlignmentMode::oracle);
  REQUIRE(b.images.size() == 4);
  for (const auto& e : b.images) {
    CHECK(e.f == 1.0);
    CHECK(e.p.size() == fx.lm.vocab.size());
    CHECK(total_variation(e.p, b.p0) > 1e-6);
  }
  const auto learned = predict_distributions(prompt, images, models, AlignmentMode::learned);
  for (const auto& e : learned.images) CHECK((e.f >= 0.0 && e.f <= 1.0));
  const auto tokens = tokenize(prompt, fx.lm.vocab);
  const auto direct = softmax(lm_forward(tokens, fx.lm).logits.row(tokens.size() - 1));
  CHECK(b.p0.bit_equal(direct));

  auto closed = fx.fusion;
  zero_visual_pathway(closed);
  Models cm = models;
  cm.fusion = &closed;
  const auto c = predict_distributions(prompt, images, cm, AlignmentMode::oracle);
  for (const auto& e : c.images)
    for (std::size_t j = 0; j < e.p.size(); ++j) CHECK(std::abs(e.p[j] - c.p0[j]) < 1e-9);

  // a mismatched render scores lower under the oracle
  const auto other = generate_images(color_prompt(fx.world, 6), 1, 9, 0.0, fx.world);
  if (!(fx.world.objects[6].attrs.color == fx.world.objects[5].attrs.color)) {
    const auto m = predict_distributions(prompt, other, models, AlignmentMode::oracle);
    CHECK(m.images[0].f == 0.0);
  }
}

TEST_CASE("infer runs the whole pipeline") {
  const auto& fx = fixture();
  InferenceConfig cfg;
  cfg.k = 3;
  cfg.alignment = AlignmentMode::oracle;
  cfg.seed = 40;
  const auto prompt = color_prompt(fx.world, 1);
  const auto a = infer(prompt, cfg, fx.models());
  const auto b = infer(prompt, cfg, fx.models());
  REQUIRE(a.p_final);
  CHECK(a.p_final->bit_equal(*b.p_final));
  CHECK(a.images.size() == 3);
  CHECK(a.images[2].image.seed == 42);
  cfg.strategy = Strategy::text_only;
  const auto t = infer(prompt, cfg, fx.models());
  CHECK(t.images.empty());
  CHECK(t.p_final->bit_equal(t.p0));

  const auto j = nlohmann::json::parse(bundle_json(a, fx.lm.vocab));
  CHECK(j.at("strategy") == "clip_fusion");
  CHECK(j.at("images").size() == 3);
  CHECK(j.at("p_0").size() == fx.lm.vocab.size());
  CHECK(j.at("argmax_final").get<std::string>() == fx.lm.vocab.word(static_cast<TokenId>(a.p_final->argmax())));
}

TEST_CASE("embedding substitute") {
  const auto& fx = fixture();
  const auto prompt = color_prompt(fx.world, 2);
  const auto p = embedding_substitute_predict(prompt, fx.models());
  CHECK(p.size() == fx.lm.vocab.size());
  const auto tokens = tokenize(prompt, fx.lm.vocab);
  const auto p0 = softmax(lm_forward(tokens, fx.lm).logits.row(tokens.size() - 1));
  CHECK(total_variation(p, p0) > 1e-6);
  auto closed = fx.fusion;
  zero_visual_pathway(closed);
  Models cm = fx.models();
  cm.fusion = &closed;
  const auto q = embedding_substitute_predict(prompt, cm);
  for (std::size_t j = 0; j < q.size(); ++j) CHECK(std::abs(q[j] - p0[j]) < 1e-9);
}

TEST_CASE("retrieval") {
  const auto& fx = fixture();
  std::vector<ImageSample> gallery;
  for (std::size_t o = 0; o < 8; ++o) gallery.push_back(render(fx.world.objects[o].attrs, o, 0.0));
  const auto prompt = color_prompt(fx.world, 4);
  const auto a = retrieval_predict(prompt, gallery, 3, fx.models(), AlignmentMode::oracle);
  const auto b = retrieval_predict(prompt, gallery, 3, fx.models(), AlignmentMode::oracle);
  REQUIRE(a.p_final);
  CHECK(a.p_final->bit_equal(*b.p_final));
  CHECK(a.images.size() == 3);
  CHECK_FALSE(a.warning);
  // chosen images are the best-scoring ones
  const auto scores = alignment_batch(prompt, gallery, fx.vision, fx.models().calibration);
  std::vector<double> s;
  for (const auto& x : scores) s.push_back(x.s);
  std::sort(s.begin(), s.end(), std::greater<>());
  const auto chosen = alignment_batch(prompt, std::vector<ImageSample>{a.images[0].image, a.images[1].image, a.images[2].image},
                                      fx.vision, fx.models().calibration);
  for (std::size_t i = 0; i < 3; ++i) CHECK(chosen[i].s == s[i]);
  const auto c = retrieval_predict(prompt, std::span(gallery).first(2), 3, fx.models(), AlignmentMode::oracle);
  CHECK(c.warning);
  CHECK(c.images.size() == 2);
  CHECK_THROWS_AS(retrieval_predict(prompt, {}, 3, fx.models(), AlignmentMode::oracle), ArgumentError);
}

TEST_CASE("best of n") {
  const std::vector<std::string> one = {"the dax is red and the wug is blue ."};
  auto vocab = Vocabulary::build(one);
  LmConfig c;
  c.layers = 2;
  c.heads = 2;
  c.d_model = 16;
  c.context = 16;
  LmTrainConfig tc;
  tc.steps = 200;
  tc.batch = 4;
  tc.lr = 3e-3;
  const std::vector<Tokens> corpus = {tokenize(one[0], vocab)};
  const auto lm = train_lm(vocab, corpus, c, tc, 3);

  const auto single = best_of_n("the dax is", 1, lm, 17);
  CHECK(single.index == 0);
  CHECK(single.completion.text == sample("the dax is", 1.0, 17, 8, lm).text);
  CHECK_THROWS_AS(best_of_n("the dax is", 0, lm, 1), ArgumentError);

  int hits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    hits += best_of_n("the dax is", 8, lm, seed * 8).completion.text == "red and the wug is blue .";
  CHECK(hits >= 95);

  // an untrained model with an all-UNK prompt still breaks ties toward the first sample
  auto fresh_cfg = c;
  fresh_cfg.vocab_size = vocab.size();
  const auto fresh = init_lm(fresh_cfg, vocab, 1);
  const auto r = best_of_n("zzz", 4, fresh, 0, 0);
  CHECK(r.index == 0);
}
