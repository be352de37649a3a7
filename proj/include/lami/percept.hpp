#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lami/ops.hpp"
#include "lami/params.hpp"
#include "lami/vocab.hpp"
#include "lami/world.hpp"

namespace lami {

inline constexpr std::size_t kPatchSide = 4;
inline constexpr std::size_t kNumPatches = (kImageSide / kPatchSide) * (kImageSide / kPatchSide);
inline constexpr std::size_t kPatchValues = kPatchSide * kPatchSide * kImageChannels;

struct DualEncoderConfig {
  std::size_t d_v = 32;
  std::size_t joint = 32;
  double temperature = 0.1;
  std::size_t steps = 2500;
  std::size_t batch = 32;
  double lr = 4e-3;
  double weight_decay = 0.01;
  /// Draw a fresh jitter of each sampled pair's drawn attributes every step.
  bool rerender = true;
  /// Probability that a batch slot is drawn from the pairs that name no object.
  double object_free_share = 0.5;
};

struct DualEncoderCheckpoint {
  DualEncoderConfig config;
  Vocabulary vocab;
  NamedTensors params;

  std::uint64_t hash() const { return hash_tensors(params); }
};

/// 16 x 48: one row per 4x4 patch, raster order, values y, x, channel.
Tensor image_patches(const ImageSample& image);
/// Same, from a 16 x 16 x 3 tensor.
Tensor image_patches(const Tensor& pixels);

class DualGraph {
 public:
  DualGraph(Graph& graph, const DualEncoderCheckpoint& ckpt, bool trainable);

  /// Patch features z^v of every image stacked: (16 * count) x d_v.
  Var patch_features(std::span<const ImageSample> images) const;
  Var image_embeddings(std::span<const ImageSample> images) const;
  Var text_embeddings(std::span<const std::string> texts) const;
  const BoundVars& vars() const noexcept { return vars_; }

 private:
  Var pool_images(Var features, std::size_t count) const;

  Graph& graph_;
  const DualEncoderCheckpoint& ckpt_;
  BoundVars vars_;
};

DualEncoderCheckpoint init_dual_encoder(const DualEncoderConfig& config, const Vocabulary& vocab,
                                        std::uint64_t seed);

struct DualTrainReport {
  double final_loss = 0.0;
};

/// Symmetric in-batch contrastive loss over (caption, image) pairs.
DualEncoderCheckpoint train_dual_encoder(std::span<const PairedExample> pairs,
                                         const DualEncoderConfig& config, std::uint64_t seed,
                                         DualTrainReport* report = nullptr);

/// z^v: 16 x d_v, the image tower before pooling.
Tensor encode_image(const ImageSample& image, const DualEncoderCheckpoint& ckpt);
Tensor encode_pixels(const Tensor& pixels, const DualEncoderCheckpoint& ckpt);
/// Unit-norm joint vectors, one row per input.
Tensor embed_images(std::span<const ImageSample> images, const DualEncoderCheckpoint& ckpt);
Tensor embed_texts(std::span<const std::string> texts, const DualEncoderCheckpoint& ckpt);

struct Calibration {
  double s_lo = 0.0;
  double s_hi = 1.0;
};

struct AlignmentScore {
  double s = 0.0;
  double f = 0.0;
  /// Set when the oracle could not parse the prompt.
  bool warning = false;
};

double normalize_score(double s, const Calibration& cal);
double cosine(std::span<const double> a, std::span<const double> b);

AlignmentScore alignment(const std::string& text, const ImageSample& image,
                         const DualEncoderCheckpoint& ckpt, const Calibration& cal);
/// Scores every image against one text with a single text encoding.
std::vector<AlignmentScore> alignment_batch(const std::string& text, std::span<const ImageSample> images,
                                            const DualEncoderCheckpoint& ckpt, const Calibration& cal);

/// Attributes a prompt refers to: those it names explicitly plus the one it
/// asks about, resolved through the named object. With neither, all of the
/// named object's attributes. Empty when nothing can be resolved.
PartialAttributes referenced_attributes(const std::string& prompt, const WorldSpec& world);
AlignmentScore oracle_alignment(const PartialAttributes& referenced, const ImageSample& image);
AlignmentScore oracle_alignment(const std::string& prompt, const ImageSample& image, const WorldSpec& world);

/// 1st and 99th percentiles of matched-pair cosines.
Calibration calibrate(std::span<const std::string> texts, std::span<const ImageSample> images,
                      const DualEncoderCheckpoint& ckpt);

/// Linear-interpolated percentile, q in [0,1].
double percentile(std::vector<double> values, double q);

}  // namespace lami
