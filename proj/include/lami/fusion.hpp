#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lami/lm.hpp"
#include "lami/percept.hpp"

namespace lami {

enum class Placement : std::uint8_t { early, intermediate, late };
inline constexpr std::array<Placement, 3> kPlacements = {Placement::early, Placement::intermediate, Placement::late};

std::string_view placement_name(Placement p);
Placement parse_placement(std::string_view name);

struct FusionVariant {
  Placement placement = Placement::late;
  /// Inference-time only: k generated images instead of one.
  bool multi_image = true;
};

struct FusionConfig {
  std::size_t hidden = 128;
  std::size_t stage1_steps = 2000;
  double stage1_lr = 1.5e-3;
  std::size_t stage2_steps = 500;
  double stage2_lr = 1.5e-4;
  std::size_t batch = 16;
  double weight_decay = 0.01;
};

/// Trainable fusion weights. late and intermediate: vtp.w1, vtp.w2 and the
/// attention block lfal.{wq,wk,wv,wv_vis,wo}; early: vtp.w1, vtp.w2 and the
/// scalar prefix.gate.
struct FusionParams {
  Placement placement = Placement::late;
  NamedTensors params;

  std::uint64_t hash() const { return hash_tensors(params); }
  std::size_t d_v() const { return params.at("vtp.w2").rows(); }
  std::size_t d_x() const { return params.at("vtp.w1").cols(); }
};

/// Visual value and output projections start at zero (early: gate starts at 1).
FusionParams init_fusion(Placement placement, std::size_t d_v, std::size_t d_x, const FusionConfig& config,
                         std::uint64_t seed);
/// Closes the visual pathway: zero visual value/output projections, or a zero prefix gate.
void zero_visual_pathway(FusionParams& params);

/// Layer index after which the intermediate block sits: ceil(L/2).
std::size_t intermediate_layer(const LmConfig& config);

/// u^v = gelu(z^v W2) W1, row-wise.
Tensor vtp_forward(const Tensor& zv, const FusionParams& params);
/// z^x + Attn(Q = z^x, K = V = [u^v; z^x]) Wo, then the LM's unembedding.
Tensor lfal_forward(const Tensor& uv, const Tensor& zx, const FusionParams& params, const LmCheckpoint& lm);
/// Text-row logits for one token sequence conditioned on u^v, per the params' placement.
Tensor fuse_forward(const FusionParams& params, const Tensor& uv, std::span<const TokenId> tokens,
                    const LmCheckpoint& lm);
/// One logits matrix per image feature set, all conditioned on the same tokens.
std::vector<Tensor> fuse_images(const FusionParams& params, std::span<const TokenId> tokens,
                                std::span<const Tensor> zvs, const LmCheckpoint& lm);

/// Graph-level pieces, shared by training and inference.
namespace fusion_graph {

/// Row layout: all u^v blocks first (n_v rows per sequence), then all text rows.
/// Text row t of sequence s sees its own u^v block and text rows <= t.
AttentionMask visual_text_mask(const SequenceBatch& batch, std::size_t n_v);

Var vtp(Var zv, const BoundVars& fv);
/// states: text rows (stacked); uv: n_v rows per sequence (stacked).
Var lfal_block(Var states, Var uv, const SequenceBatch& batch, std::size_t n_v, const BoundVars& fv);
/// Logits for the text rows of every sequence; `uv` holds n_v rows per sequence.
Var forward(const LmGraph& lm, const BoundVars& fv, Placement placement, const SequenceBatch& batch, Var uv);

}  // namespace fusion_graph

struct FusionTrainReport {
  double stage1_final_loss = 0.0;
  double stage2_final_loss = 0.0;
  std::uint64_t lm_hash_before = 0, lm_hash_after = 0;
  std::uint64_t vision_hash_before = 0, vision_hash_after = 0;
  /// L2 norm of each parameter's gradient at the last step.
  std::map<std::string, double> last_grad_norms;
};

/// Next-token loss on caption tokens with the LM and vision tower frozen.
FusionParams train_fusion(const LmCheckpoint& lm, const DualEncoderCheckpoint& vision,
                          std::span<const PairedExample> pairs, Placement placement, const FusionConfig& config,
                          std::uint64_t seed, FusionTrainReport* report = nullptr);

struct AttributeLoss {
  double fused = 0.0;
  double text_only = 0.0;
  std::size_t tokens = 0;
};

/// Mean NLL of attribute-word targets (colors, shapes, sizes) in the captions,
/// with and without the image.
AttributeLoss attribute_token_loss(const FusionParams& params, const LmCheckpoint& lm,
                                   const DualEncoderCheckpoint& vision, std::span<const PairedExample> pairs);

/// Mean next-token NLL over every caption position.
double fused_caption_loss(const FusionParams& params, const LmCheckpoint& lm, const DualEncoderCheckpoint& vision,
                          std::span<const PairedExample> pairs);

}  // namespace lami
