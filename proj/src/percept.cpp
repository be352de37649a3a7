#include "lami/percept.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lami/errors.hpp"

namespace lami {
namespace {

Tensor pooling_matrix(std::span<const std::size_t> group_sizes) {
  const std::size_t total = std::accumulate(group_sizes.begin(), group_sizes.end(), std::size_t{0});
  Tensor m = Tensor::zeros({group_sizes.size(), total});
  auto d = m.mutable_data();
  std::size_t col = 0;
  for (std::size_t g = 0; g < group_sizes.size(); ++g) {
    for (std::size_t j = 0; j < group_sizes[g]; ++j) d[g * total + col + j] = 1.0 / static_cast<double>(group_sizes[g]);
    col += group_sizes[g];
  }
  return m;
}

AttentionMask per_image_mask(std::size_t count) {
  AttentionMask mask(count * kNumPatches);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t p = 0; p < kNumPatches; ++p) mask.add_row({KeySpan{i * kNumPatches, (i + 1) * kNumPatches}});
  return mask;
}

double unit_draw(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

Tensor image_patches(const ImageSample& image) {
  Tensor out = Tensor::zeros({kNumPatches, kPatchValues});
  auto d = out.mutable_data();
  const std::size_t per_row = kImageSide / kPatchSide;
  for (std::size_t p = 0; p < kNumPatches; ++p) {
    const std::size_t py = p / per_row, px = p % per_row;
    std::size_t k = 0;
    for (std::size_t y = 0; y < kPatchSide; ++y)
      for (std::size_t x = 0; x < kPatchSide; ++x)
        for (std::size_t c = 0; c < kImageChannels; ++c)
          d[p * kPatchValues + k++] = image.at(py * kPatchSide + y, px * kPatchSide + x, c);
  }
  return out;
}

Tensor image_patches(const Tensor& pixels) {
  if (pixels.shape() != Shape{kImageSide, kImageSide, kImageChannels}) {
    throw DimensionError("image must be 16x16x3, got " + shape_str(pixels.shape()));
  }
  ImageSample img;
  std::copy(pixels.data().begin(), pixels.data().end(), img.pixels.begin());
  return image_patches(img);
}

DualGraph::DualGraph(Graph& graph, const DualEncoderCheckpoint& ckpt, bool trainable)
    : graph_(graph), ckpt_(ckpt), vars_(bind(graph, ckpt.params, trainable)) {}

Var DualGraph::patch_features(std::span<const ImageSample> images) const {
  if (images.empty()) throw ArgumentError("no images to encode");
  std::vector<Var> parts;
  parts.reserve(images.size());
  for (const auto& img : images) {
    Tensor t = image_patches(img);
    for (auto& v : t.mutable_data()) v -= kBackground;
    parts.push_back(graph_.constant(std::move(t)));
  }
  Var x = parts.size() == 1 ? parts[0] : concat_rows(parts);
  auto p = [&](const char* n) { return vars_.at(n); };
  x = add_row(matmul(x, p("img.patch.w")), p("img.patch.b"));
  Var h = layer_norm(x, p("img.ln1.gain"), p("img.ln1.bias"));
  Var att = attention(matmul(h, p("img.attn.wq")), matmul(h, p("img.attn.wk")), matmul(h, p("img.attn.wv")),
                      per_image_mask(images.size()));
  x = add(x, matmul(att, p("img.attn.wo")));
  h = layer_norm(x, p("img.ln2.gain"), p("img.ln2.bias"));
  h = gelu(add_row(matmul(h, p("img.mlp.w1")), p("img.mlp.b1")));
  return add(x, add_row(matmul(h, p("img.mlp.w2")), p("img.mlp.b2")));
}

Var DualGraph::pool_images(Var features, std::size_t count) const {
  std::vector<std::size_t> sizes(count, kNumPatches);
  return matmul(graph_.constant(pooling_matrix(sizes)), features);
}

Var DualGraph::image_embeddings(std::span<const ImageSample> images) const {
  Var pooled = pool_images(patch_features(images), images.size());
  return l2_normalize_rows(matmul(pooled, vars_.at("img.proj")));
}

Var DualGraph::text_embeddings(std::span<const std::string> texts) const {
  if (texts.empty()) throw ArgumentError("no texts to encode");
  std::vector<std::size_t> ids, sizes;
  for (const auto& t : texts) {
    auto tok = encode_words(t, ckpt_.vocab);
    if (tok.empty()) tok.push_back(Vocabulary::kUnk);
    ids.insert(ids.end(), tok.begin(), tok.end());
    sizes.push_back(tok.size());
  }
  Var bag = matmul(graph_.constant(pooling_matrix(sizes)), gather_rows(vars_.at("txt.emb"), ids));
  return l2_normalize_rows(matmul(bag, vars_.at("txt.proj")));
}

DualEncoderCheckpoint init_dual_encoder(const DualEncoderConfig& config, const Vocabulary& vocab,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_v, j = config.joint;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(kPatchValues));
  const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
  DualEncoderCheckpoint ck{config, vocab, {}};
  auto& p = ck.params;
  p["img.patch.w"] = random_normal({kPatchValues, d}, s_in, rng);
  p["img.patch.b"] = Tensor::zeros({d});
  p["img.ln1.gain"] = Tensor::filled({d}, 1.0);
  p["img.ln1.bias"] = Tensor::zeros({d});
  p["img.attn.wq"] = random_normal({d, d}, s_d, rng);
  p["img.attn.wk"] = random_normal({d, d}, s_d, rng);
  p["img.attn.wv"] = random_normal({d, d}, s_d, rng);
  p["img.attn.wo"] = random_normal({d, d}, s_d * 0.5, rng);
  p["img.ln2.gain"] = Tensor::filled({d}, 1.0);
  p["img.ln2.bias"] = Tensor::zeros({d});
  p["img.mlp.w1"] = random_normal({d, 4 * d}, s_d, rng);
  p["img.mlp.b1"] = Tensor::zeros({4 * d});
  p["img.mlp.w2"] = random_normal({4 * d, d}, s_d * 0.5, rng);
  p["img.mlp.b2"] = Tensor::zeros({d});
  p["img.proj"] = random_normal({d, j}, s_d, rng);
  p["txt.emb"] = random_normal({vocab.size(), j}, 0.1, rng);
  p["txt.proj"] = random_normal({j, j}, 1.0 / std::sqrt(static_cast<double>(j)), rng);
  return ck;
}

DualEncoderCheckpoint train_dual_encoder(std::span<const PairedExample> pairs, const DualEncoderConfig& config,
                                         std::uint64_t seed, DualTrainReport* report) {
  if (pairs.size() < 64) throw ArgumentError("train_dual_encoder needs at least 64 pairs");
  std::vector<std::string> captions;
  for (const auto& p : pairs) captions.push_back(p.caption);
  auto ck = init_dual_encoder(config, Vocabulary::build(captions), seed);
  std::mt19937_64 rng(seed ^ 0xd0a1ULL);
  std::vector<std::size_t> object_free;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (!pairs[i].object) object_free.push_back(i);
  AdamW opt({.weight_decay = config.weight_decay});
  const std::size_t b = std::min(config.batch, pairs.size());
  double last = 0.0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<ImageSample> imgs;
    std::vector<std::string> texts;
    // at most one pair per attribute combination, so no in-batch negative is a true match
    for (std::size_t tries = 0; imgs.size() < b; ++tries) {
      const bool pick_free = !object_free.empty() && unit_draw(rng) < config.object_free_share;
      const auto& p = pick_free ? pairs[object_free[rng() % object_free.size()]]
                                : pairs[static_cast<std::size_t>(rng() % pairs.size())];
      const bool dup = std::any_of(imgs.begin(), imgs.end(), [&](const ImageSample& x) { return x.meta == p.image.meta; });
      if (dup && tries < 64 * b) continue;
      imgs.push_back(config.rerender ? render(p.image.meta, splitmix64(seed + step * b + imgs.size()), 0.0) : p.image);
      texts.push_back(p.caption);
    }
    std::map<std::string, Tensor> grads;
    try {
      Graph g;
      DualGraph dg(g, ck, true);
      Var logits = scale(matmul(dg.image_embeddings(imgs), transpose(dg.text_embeddings(texts))),
                         1.0 / config.temperature);
      std::vector<long> diag(b);
      std::iota(diag.begin(), diag.end(), 0L);
      Var loss = scale(add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag)), 0.5);
      last = loss.value().item();
      auto gr = g.backward(loss);
      for (const auto& [name, v] : dg.vars()) grads.emplace(name, gr[v]);
    } catch (const NumericError& e) {
      throw TrainingError(step, e.what());
    }
    opt.step(ck.params, grads, cosine_lr(config.lr, step, config.steps));
  }
  if (report) report->final_loss = last;
  return ck;
}

Tensor encode_image(const ImageSample& image, const DualEncoderCheckpoint& ckpt) {
  Graph g;
  DualGraph dg(g, ckpt, false);
  return dg.patch_features(std::span<const ImageSample>(&image, 1)).value();
}

Tensor encode_pixels(const Tensor& pixels, const DualEncoderCheckpoint& ckpt) {
  image_patches(pixels);
  ImageSample img;
  std::copy(pixels.data().begin(), pixels.data().end(), img.pixels.begin());
  return encode_image(img, ckpt);
}

Tensor embed_images(std::span<const ImageSample> images, const DualEncoderCheckpoint& ckpt) {
  Graph g;
  DualGraph dg(g, ckpt, false);
  return dg.image_embeddings(images).value();
}

Tensor embed_texts(std::span<const std::string> texts, const DualEncoderCheckpoint& ckpt) {
  Graph g;
  DualGraph dg(g, ckpt, false);
  return dg.text_embeddings(texts).value();
}

double normalize_score(double s, const Calibration& cal) {
  if (!(cal.s_hi > cal.s_lo)) throw ConfigError("calibration requires s_hi > s_lo");
  return std::clamp((s - cal.s_lo) / (cal.s_hi - cal.s_lo), 0.0, 1.0);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

AlignmentScore alignment(const std::string& text, const ImageSample& image, const DualEncoderCheckpoint& ckpt,
                         const Calibration& cal) {
  return alignment_batch(text, std::span<const ImageSample>(&image, 1), ckpt, cal)[0];
}

std::vector<AlignmentScore> alignment_batch(const std::string& text, std::span<const ImageSample> images,
                                            const DualEncoderCheckpoint& ckpt, const Calibration& cal) {
  const Tensor t = embed_texts(std::span<const std::string>(&text, 1), ckpt);
  std::vector<AlignmentScore> out;
  for (const auto& img : images) {
    const Tensor v = embed_images(std::span<const ImageSample>(&img, 1), ckpt);
    AlignmentScore a;
    a.s = cosine(t.row(0), v.row(0));
    a.f = normalize_score(a.s, cal);
    out.push_back(a);
  }
  return out;
}

PartialAttributes referenced_attributes(const std::string& prompt, const WorldSpec& world) {
  const ParsedText p = parse_text(prompt, world);
  PartialAttributes ref = p.mentioned;
  if (p.object) {
    const auto& truth = world.objects[*p.object].attrs;
    if (p.asked) ref.set(*p.asked, truth.get(*p.asked));
    if (ref.count() == 0)
      for (auto kind : kAttrKinds) ref.set(kind, truth.get(kind));
  }
  return ref;
}

AlignmentScore oracle_alignment(const PartialAttributes& referenced, const ImageSample& image) {
  AlignmentScore a;
  if (referenced.count() == 0) {
    a.warning = true;
    return a;
  }
  std::size_t match = 0;
  for (auto kind : kAttrKinds)
    if (auto v = referenced.get(kind)) match += *v == image.meta.get(kind);
  a.f = static_cast<double>(match) / static_cast<double>(referenced.count());
  a.s = a.f;
  return a;
}

AlignmentScore oracle_alignment(const std::string& prompt, const ImageSample& image, const WorldSpec& world) {
  return oracle_alignment(referenced_attributes(prompt, world), image);
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Calibration calibrate(std::span<const std::string> texts, std::span<const ImageSample> images,
                      const DualEncoderCheckpoint& ckpt) {
  if (texts.size() != images.size() || texts.empty()) throw ArgumentError("calibrate needs matched, nonempty pairs");
  const Tensor t = embed_texts(texts, ckpt);
  const Tensor v = embed_images(images, ckpt);
  std::vector<double> s;
  for (std::size_t i = 0; i < texts.size(); ++i) s.push_back(cosine(t.row(i), v.row(i)));
  Calibration cal{percentile(s, 0.01), percentile(s, 0.99)};
  if (!(cal.s_hi > cal.s_lo)) throw MeasurementError("degenerate calibration: all matched cosines equal");
  return cal;
}

}  // namespace lami
