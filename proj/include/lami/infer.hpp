#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lami/distribution.hpp"
#include "lami/fusion.hpp"
#include "lami/lm.hpp"
#include "lami/percept.hpp"
#include "lami/world.hpp"

namespace lami {

enum class Strategy : std::uint8_t {
  clip_fusion,
  average_logits,
  max_confidence,
  single_image,
  text_only,
  entropy_weighted
};
inline constexpr std::array<Strategy, 6> kStrategies = {Strategy::clip_fusion,    Strategy::average_logits,
                                                        Strategy::max_confidence, Strategy::single_image,
                                                        Strategy::text_only,      Strategy::entropy_weighted};
std::string_view strategy_name(Strategy s);
/// ConfigError on unknown names.
Strategy parse_strategy(std::string_view name);

enum class AlignmentMode : std::uint8_t { learned, oracle };
std::string_view alignment_mode_name(AlignmentMode m);
AlignmentMode parse_alignment_mode(std::string_view name);

struct InferenceConfig {
  std::size_t k = 6;
  Strategy strategy = Strategy::clip_fusion;
  double epsilon = 0.0;
  AlignmentMode alignment = AlignmentMode::learned;
  std::uint64_t seed = 0;
  /// entropy_weighted temperature.
  double tau = 1.0;

  /// ConfigError: k == 0, single_image with k != 1, eps outside [0,1], tau <= 0.
  void validate() const;
};

/// Everything inference reads. All members must outlive the struct.
struct Models {
  const LmCheckpoint* lm = nullptr;
  const DualEncoderCheckpoint* vision = nullptr;
  const FusionParams* fusion = nullptr;
  const WorldSpec* world = nullptr;
  Calibration calibration;
};

struct ImagePrediction {
  /// Position in generation order; aggregation sums in this order.
  std::size_t index = 0;
  Distribution p;
  double f = 0.0;
  ImageSample image;
};

struct PredictionBundle {
  Distribution p0;
  std::vector<ImagePrediction> images;
  std::optional<Distribution> p_final;
  Strategy strategy = Strategy::clip_fusion;
  /// Set when fewer images than requested were available, or alignment could not parse the prompt.
  bool warning = false;
};

/// k renders of the first object the prompt names, seeds seed + i.
std::vector<ImageSample> generate_images(const std::string& prompt, std::size_t k, std::uint64_t seed, double epsilon,
                                         const WorldSpec& world);

/// p_0 and one p_i per image for the token after `tokens`; f_i scored against `prompt`.
PredictionBundle predict_distributions(const std::string& prompt, std::span<const TokenId> tokens,
                                       std::span<const ImageSample> images, const Models& models,
                                       AlignmentMode alignment);
/// Same, for the token after the tokenized prompt.
PredictionBundle predict_distributions(const std::string& prompt, std::span<const ImageSample> images,
                                       const Models& models, AlignmentMode alignment);

Distribution aggregate(const PredictionBundle& bundle, Strategy strategy, double tau = 1.0);

/// generate_images, predict_distributions, aggregate; p_final filled in.
PredictionBundle infer(const std::string& prompt, const InferenceConfig& config, const Models& models);

struct BestOfN {
  Completion completion;
  std::size_t index = 0;
};

/// n samples at T = 1 with seeds seed + i; highest mean log-probability, ties to the lowest index.
BestOfN best_of_n(const std::string& prompt, std::size_t n, const LmCheckpoint& lm, std::uint64_t seed,
                  std::size_t max_tokens = 8);

/// Prompt's text-tower embedding broadcast to every patch row in place of z^v.
Distribution embedding_substitute_predict(const std::string& prompt, const Models& models);

/// Top-k gallery images by learned alignment score (ties: lower gallery index), then
/// clip_fusion with the configured alignment mode.
PredictionBundle retrieval_predict(const std::string& prompt, std::span<const ImageSample> gallery, std::size_t k,
                                   const Models& models, AlignmentMode alignment);

/// Debug dump: p_0, p_i, f_i, strategy, p_final and argmax token strings.
std::string bundle_json(const PredictionBundle& bundle, const Vocabulary& vocab);

}  // namespace lami
