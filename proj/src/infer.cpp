#include "lami/infer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "lami/errors.hpp"

namespace lami {

namespace {

constexpr std::array<std::string_view, 6> kStrategyNames = {
    "clip_fusion", "average_logits", "max_confidence", "single_image", "text_only", "entropy_weighted"};

Distribution last_row_distribution(const Tensor& logits) { return softmax(logits.row(logits.rows() - 1)); }

// Entries ordered by generation index.
std::vector<const ImagePrediction*> ordered(const PredictionBundle& bundle) {
  std::vector<const ImagePrediction*> out;
  out.reserve(bundle.images.size());
  for (const auto& e : bundle.images) out.push_back(&e);
  std::stable_sort(out.begin(), out.end(),
                   [](const ImagePrediction* a, const ImagePrediction* b) { return a->index < b->index; });
  return out;
}

std::vector<double> alignment_scores(const std::string& prompt, std::span<const ImageSample> images,
                                     const Models& models, AlignmentMode mode, bool& warning) {
  std::vector<double> f(images.size(), 0.0);
  if (images.empty()) return f;
  if (mode == AlignmentMode::oracle) {
    const auto ref = referenced_attributes(prompt, *models.world);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto a = oracle_alignment(ref, images[i]);
      f[i] = a.f;
      warning = warning || a.warning;
    }
  } else {
    const auto scores = alignment_batch(prompt, images, *models.vision, models.calibration);
    for (std::size_t i = 0; i < images.size(); ++i) f[i] = scores[i].f;
  }
  return f;
}

void require_models(const Models& m, bool need_world) {
  if (!m.lm || !m.vision || !m.fusion) throw ConfigError("inference needs lm, vision and fusion models");
  if (need_world && !m.world) throw ConfigError("inference needs the world spec");
}

}  // namespace

std::string_view strategy_name(Strategy s) { return kStrategyNames[static_cast<std::size_t>(s)]; }

Strategy parse_strategy(std::string_view name) {
  for (std::size_t i = 0; i < kStrategyNames.size(); ++i)
    if (kStrategyNames[i] == name) return static_cast<Strategy>(i);
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

std::string_view alignment_mode_name(AlignmentMode m) { return m == AlignmentMode::oracle ? "oracle" : "learned"; }

AlignmentMode parse_alignment_mode(std::string_view name) {
  if (name == "oracle") return AlignmentMode::oracle;
  if (name == "learned") return AlignmentMode::learned;
  throw ConfigError("unknown alignment mode '" + std::string(name) + "'");
}

void InferenceConfig::validate() const {
  if (k == 0) throw ConfigError("k must be at least 1");
  if (strategy == Strategy::single_image && k != 1) throw ConfigError("single_image requires k = 1");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0,1]");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
}

std::vector<ImageSample> generate_images(const std::string& prompt, std::size_t k, std::uint64_t seed, double epsilon,
                                         const WorldSpec& world) {
  const auto parsed = parse_text(prompt, world);
  if (!parsed.object) throw GenerationError("prompt names no known object: \"" + prompt + "\"");
  const Attributes& attrs = world.objects[*parsed.object].attrs;
  std::vector<ImageSample> images;
  images.reserve(k);
  for (std::size_t i = 0; i < k; ++i) images.push_back(render(attrs, seed + i, epsilon));
  return images;
}

PredictionBundle predict_distributions(const std::string& prompt, std::span<const TokenId> tokens,
                                       std::span<const ImageSample> images, const Models& models,
                                       AlignmentMode alignment) {
  require_models(models, alignment == AlignmentMode::oracle);
  PredictionBundle bundle;
  bundle.p0 = last_row_distribution(lm_forward(tokens, *models.lm).logits);
  if (images.empty()) return bundle;
  std::vector<Tensor> zvs;
  zvs.reserve(images.size());
  for (const auto& im : images) zvs.push_back(encode_image(im, *models.vision));
  const auto logits = fuse_images(*models.fusion, tokens, zvs, *models.lm);
  const auto f = alignment_scores(prompt, images, models, alignment, bundle.warning);
  for (std::size_t i = 0; i < images.size(); ++i)
    bundle.images.push_back({i, last_row_distribution(logits[i]), f[i], images[i]});
  return bundle;
}

PredictionBundle predict_distributions(const std::string& prompt, std::span<const ImageSample> images,
                                       const Models& models, AlignmentMode alignment) {
  if (!models.lm) throw ConfigError("inference needs an lm");
  const Tokens tokens = tokenize(prompt, models.lm->vocab);
  return predict_distributions(prompt, tokens, images, models, alignment);
}

Distribution aggregate(const PredictionBundle& bundle, Strategy strategy, double tau) {
  const std::size_t v = bundle.p0.size();
  if (strategy == Strategy::text_only) return bundle.p0;
  const auto items = ordered(bundle);
  if (items.empty()) throw ArgumentError(std::string(strategy_name(strategy)) + " needs at least one image");
  for (const auto* e : items)
    if (e->p.size() != v) throw DimensionError("image distribution size differs from p_0");
  const double k = static_cast<double>(items.size());
  switch (strategy) {
    case Strategy::single_image:
      return items.front()->p;
    case Strategy::max_confidence: {
      const ImagePrediction* best = items.front();
      double best_h = best->p.entropy();
      for (const auto* e : items) {
        const double h = e->p.entropy();
        if (h < best_h) best = e, best_h = h;
      }
      return best->p;
    }
    case Strategy::average_logits: {
      std::vector<double> acc(v, 0.0);
      for (const auto* e : items)
        for (std::size_t j = 0; j < v; ++j) acc[j] += e->p[j];
      for (double& a : acc) a /= k;
      return Distribution(std::move(acc));
    }
    case Strategy::clip_fusion: {
      // (1/k) sum f_i p_i + (1 - mean f) p_0
      std::vector<double> acc(v, 0.0);
      double fsum = 0.0;
      for (const auto* e : items) {
        if (!(e->f >= 0.0 && e->f <= 1.0)) throw ArgumentError("alignment weight outside [0,1]");
        fsum += e->f;
        for (std::size_t j = 0; j < v; ++j) acc[j] += e->f * e->p[j];
      }
      const double rest = 1.0 - fsum / k;
      for (std::size_t j = 0; j < v; ++j) acc[j] = acc[j] / k + rest * bundle.p0[j];
      return Distribution(std::move(acc));
    }
    case Strategy::entropy_weighted: {
      std::vector<const Distribution*> ps{&bundle.p0};
      for (const auto* e : items) ps.push_back(&e->p);
      std::vector<double> logw(ps.size());
      for (std::size_t i = 0; i < ps.size(); ++i) logw[i] = -ps[i]->entropy() / tau;
      const double mx = *std::max_element(logw.begin(), logw.end());
      double z = 0.0;
      for (double& w : logw) z += (w = std::exp(w - mx));
      std::vector<double> acc(v, 0.0);
      for (std::size_t i = 0; i < ps.size(); ++i)
        for (std::size_t j = 0; j < v; ++j) acc[j] += (logw[i] / z) * (*ps[i])[j];
      return Distribution(std::move(acc));
    }
    case Strategy::text_only:
      break;
  }
  return bundle.p0;
}

PredictionBundle infer(const std::string& prompt, const InferenceConfig& config, const Models& models) {
  config.validate();
  require_models(models, true);
  std::vector<ImageSample> images;
  if (config.strategy != Strategy::text_only)
    images = generate_images(prompt, config.k, config.seed, config.epsilon, *models.world);
  auto bundle = predict_distributions(prompt, images, models, config.alignment);
  bundle.strategy = config.strategy;
  bundle.p_final = aggregate(bundle, config.strategy, config.tau);
  return bundle;
}

BestOfN best_of_n(const std::string& prompt, std::size_t n, const LmCheckpoint& lm, std::uint64_t seed,
                  std::size_t max_tokens) {
  if (n == 0) throw ArgumentError("best_of_n needs n >= 1");
  BestOfN best;
  for (std::size_t i = 0; i < n; ++i) {
    Completion c = sample(prompt, 1.0, seed + i, max_tokens, lm);
    if (i == 0 || c.mean_logprob > best.completion.mean_logprob) best = {std::move(c), i};
  }
  return best;
}

Distribution embedding_substitute_predict(const std::string& prompt, const Models& models) {
  require_models(models, false);
  const Tensor joint = embed_texts(std::span<const std::string>(&prompt, 1), *models.vision);
  const std::size_t d_v = models.fusion->d_v();
  if (joint.cols() != d_v)
    throw DimensionError("text embedding width " + std::to_string(joint.cols()) + " differs from d_v " +
                         std::to_string(d_v));
  Tensor zv({kNumPatches, d_v});
  auto out = zv.mutable_data();
  for (std::size_t r = 0; r < kNumPatches; ++r) std::copy(joint.data().begin(), joint.data().end(), out.begin() + r * d_v);
  const Tokens tokens = tokenize(prompt, models.lm->vocab);
  const auto logits = fuse_images(*models.fusion, tokens, std::span<const Tensor>(&zv, 1), *models.lm);
  return last_row_distribution(logits.front());
}

PredictionBundle retrieval_predict(const std::string& prompt, std::span<const ImageSample> gallery, std::size_t k,
                                   const Models& models, AlignmentMode alignment) {
  if (gallery.empty()) throw ArgumentError("retrieval gallery is empty");
  if (k == 0) throw ArgumentError("retrieval needs k >= 1");
  require_models(models, alignment == AlignmentMode::oracle);
  const auto scores = alignment_batch(prompt, gallery, *models.vision, models.calibration);
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a].s > scores[b].s; });
  const std::size_t take = std::min(k, gallery.size());
  std::vector<ImageSample> chosen;
  for (std::size_t i = 0; i < take; ++i) chosen.push_back(gallery[order[i]]);
  auto bundle = predict_distributions(prompt, chosen, models, alignment);
  bundle.warning = bundle.warning || take < k;
  bundle.strategy = Strategy::clip_fusion;
  bundle.p_final = aggregate(bundle, Strategy::clip_fusion);
  return bundle;
}

std::string bundle_json(const PredictionBundle& bundle, const Vocabulary& vocab) {
  using nlohmann::json;
  auto probs = [](const Distribution& d) { return json(std::vector<double>(d.probs().begin(), d.probs().end())); };
  json j;
  j["strategy"] = std::string(strategy_name(bundle.strategy));
  j["p_0"] = probs(bundle.p0);
  j["argmax_0"] = vocab.word(static_cast<TokenId>(bundle.p0.argmax()));
  json imgs = json::array();
  for (const auto* e : ordered(bundle)) {
    json drawn;
    for (auto kind : kAttrKinds)
      drawn[std::string(attr_kind_name(kind))] = std::string(attr_value_name(kind, e->image.meta.get(kind)));
    imgs.push_back({{"index", e->index},
                    {"f", e->f},
                    {"p", probs(e->p)},
                    {"argmax", vocab.word(static_cast<TokenId>(e->p.argmax()))},
                    {"seed", e->image.seed},
                    {"drawn", std::move(drawn)}});
  }
  j["images"] = std::move(imgs);
  if (bundle.p_final) {
    j["p_final"] = probs(*bundle.p_final);
    j["argmax_final"] = vocab.word(static_cast<TokenId>(bundle.p_final->argmax()));
  }
  j["warning"] = bundle.warning;
  return j.dump(2);
}

}  // namespace lami
