#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lami/fusion.hpp"
#include "lami/infer.hpp"
#include "lami/lm.hpp"
#include "lami/percept.hpp"
#include "lami/world.hpp"

namespace lami {

// ---- configuration

struct WorldConfig {
  std::uint64_t seed = 0;
  std::size_t objects = 64;
  double heldout_fraction = 0.25;
};

struct RunConfig {
  std::uint64_t seed = 0;
  WorldConfig world;
  /// Render noise at inference.
  double epsilon = 0.0;
  LmConfig lm;
  LmTrainConfig lm_train;
  DualEncoderConfig dual;
  FusionConfig fusion;
  Placement placement = Placement::late;
  /// epsilon and seed are taken from the run, not from here.
  InferenceConfig inference;
  /// Estimated on the calibration split when absent.
  std::optional<Calibration> calibration;
  std::vector<QaTask> tasks = {QaTask::color, QaTask::shape, QaTask::size_yesno};
  std::vector<std::size_t> k_values = {1, 2, 3, 4, 5, 6};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::size_t threads = 1;
  std::size_t best_of_n_max_tokens = 1;
  std::string output_dir = "lami-out";
  /// Wall-clock ms in report rows; 0 otherwise so reports stay byte-identical.
  bool report_timing = false;
};

/// Unknown keys anywhere are a ConfigError; absent keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& config, const std::string& path);

// ---- checkpoints

enum class ComponentTag : std::uint8_t { lm, dual, fusion };
std::string_view component_tag_name(ComponentTag tag);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const LmCheckpoint& ckpt, const std::string& path);
void save_checkpoint(const DualEncoderCheckpoint& ckpt, const std::string& path);
void save_checkpoint(const FusionParams& params, const std::string& path);
/// FormatError (with byte offset) on bad magic, version, tag or truncation.
LmCheckpoint load_lm_checkpoint(const std::string& path);
DualEncoderCheckpoint load_dual_checkpoint(const std::string& path);
FusionParams load_fusion_checkpoint(const std::string& path);

// ---- trained pipeline for one seed

struct PipelineTimings {
  double lm_s = 0.0, dual_s = 0.0, fusion_s = 0.0;
};

struct Pipeline {
  std::uint64_t seed = 0;
  WorldSpec world;
  Corpora corpora;
  LmCheckpoint lm;
  LmTrainReport lm_report;
  DualEncoderCheckpoint vision;
  Calibration calibration;
  std::map<Placement, FusionParams> fusion;
  /// Only for components trained in this call, not loaded from a cache.
  bool lm_trained = false;
  std::map<Placement, FusionTrainReport> fusion_reports;
  PipelineTimings timings;

  /// ConfigError naming the placement when it was not trained.
  Models models(Placement placement) const;
};

struct SeedPlan {
  std::uint64_t world, lm, dual, fusion, inference;
};
/// Per-stage seeds of run seed s.
SeedPlan seed_plan(const RunConfig& config, std::uint64_t seed);

/// Prompts (train-object color and shape questions) and fresh renders for calibration.
struct CalibrationSplit {
  std::vector<std::string> texts;
  std::vector<ImageSample> images;
};
CalibrationSplit calibration_split(const WorldSpec& world, const HeldoutFacts& heldout, std::uint64_t seed);

/// World, corpora, LM, dual encoder, calibration and one fusion model per placement.
/// With a cache_dir, checkpoints there are reused when trained from the same inputs,
/// and whatever gets trained is saved there.
Pipeline build_pipeline(const RunConfig& config, std::uint64_t seed, std::span<const Placement> placements,
                        const std::string& cache_dir = "");

/// <output_dir>/seed-<seed>
std::string pipeline_dir(const std::string& output_dir, std::uint64_t seed);
std::string fusion_checkpoint_name(Placement placement);

// ---- evaluation

struct ResultRow {
  std::string task;
  std::string method;
  std::size_t k = 0;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  std::size_t correct = 0;
  std::size_t count = 0;
  double ms = 0.0;

  double accuracy() const { return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count); }
};

/// Mean log p_final of each candidate's tokens; images generated once per item.
std::vector<double> score_item(const QaItem& item, const InferenceConfig& config, const Models& models);
/// Predicted index: highest score, ties to the lowest.
std::size_t predict_item(const QaItem& item, const InferenceConfig& config, const Models& models);

/// Per-item image seed for an inference seed.
std::uint64_t item_image_seed(std::uint64_t inference_seed, const QaItem& item);

struct EvalOptions {
  std::size_t threads = 1;
  bool timing = false;
  std::string method;  // defaults to the strategy name
};

/// DataError on an empty set or an item with no candidates.
ResultRow run_task(std::span<const QaItem> items, const InferenceConfig& config, const Models& models,
                   const EvalOptions& options = {});

/// Best-of-N sampling: the answer is the candidate that starts the chosen completion,
/// else the text-only ranking.
ResultRow run_best_of_n(std::span<const QaItem> items, std::size_t n, const Models& models, std::uint64_t seed,
                        std::size_t max_tokens, const EvalOptions& options = {});

struct CurvePoint {
  std::size_t k = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
};

struct SweepResult {
  std::vector<ResultRow> rows;
  std::vector<CurvePoint> curve;
};

/// One row per (seed, k) on `task`, plus mean and standard error across seeds per k.
SweepResult sweep_k(std::span<const Pipeline* const> pipelines, QaTask task, std::span<const std::size_t> k_values,
                    const InferenceConfig& base, Placement placement, double epsilon, const EvalOptions& options = {});

struct AblationSpec {
  std::vector<Placement> placements = {kPlacements.begin(), kPlacements.end()};
  std::vector<Strategy> strategies = {Strategy::clip_fusion, Strategy::average_logits, Strategy::max_confidence,
                                      Strategy::single_image};
  std::vector<QaTask> tasks = {QaTask::color, QaTask::shape, QaTask::size_yesno};
};

struct AblationResult {
  /// Placement x {single, multi} cells, method "<placement>+<multi|single>".
  std::vector<ResultRow> placement_rows;
  /// Strategy cells with the run's placement.
  std::vector<ResultRow> strategy_rows;
};

AblationResult ablation_matrix(std::span<const Pipeline* const> pipelines, const AblationSpec& spec,
                               const InferenceConfig& base, Placement strategy_placement, double epsilon,
                               const EvalOptions& options = {});

/// Mean accuracy over seeds of every (task, method) in `rows`.
std::map<std::pair<std::string, std::string>, double> mean_accuracy(std::span<const ResultRow> rows);

std::string placement_table(std::span<const ResultRow> rows);
std::string strategy_table(std::span<const ResultRow> rows);

// ---- compute-matched budget

struct Budget {
  std::size_t n = 1;
  double target_ms = 0.0;
  double sample_ms = 0.0;
};

/// round(target / sample), at least 1; MeasurementError when either time is zero.
std::size_t matched_n(double target_ms, double sample_ms);

/// Median over `repetitions` passes of the per-prompt time of the target pipeline
/// and of one T = 1 completion; N = round(target / sample), at least 1, then refined
/// once from the measured cost of best_of_n(N).
Budget compute_matched_budget(const InferenceConfig& target, const Models& models,
                              std::span<const std::string> prompts, std::size_t max_tokens,
                              std::size_t repetitions = 5);

/// Median per-prompt ms of best_of_n(N) and of the target pipeline, and the median of
/// the per-repetition ratios (adjacent passes, so slow drift in machine speed cancels).
struct BudgetCheck {
  double best_of_n_ms = 0.0;
  double target_ms = 0.0;
  double ratio = 0.0;
};
BudgetCheck measure_budget(const Budget& budget, const InferenceConfig& target, const Models& models,
                           std::span<const std::string> prompts, std::size_t max_tokens,
                           std::size_t repetitions = 5);

// ---- reports

/// Rows sorted by (task, method, k, seed, epsilon).
std::vector<ResultRow> sorted_rows(std::span<const ResultRow> rows);
std::string rows_csv(std::span<const ResultRow> rows);
std::string rows_json(std::span<const ResultRow> rows);
std::vector<ResultRow> rows_from_json(const std::string& text);
std::vector<ResultRow> rows_from_csv(const std::string& text);
std::string curve_csv(std::span<const CurvePoint> curve);
/// Writes <stem>.csv and <stem>.json under dir.
void write_report(std::span<const ResultRow> rows, const std::string& dir, const std::string& stem);
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace lami
