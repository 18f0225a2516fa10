#pragma once

// End-to-end pruning: scores -> per-layer curves -> DP allocation -> masks.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmprune/allocator.hpp"
#include "dmprune/distortion.hpp"
#include "dmprune/model_ir.hpp"
#include "dmprune/refnet.hpp"

namespace dmprune {

struct PipelineConfig {
  std::size_t k_points = 20;
  // Exactly one budget is used; flops_ratio wins when both are set.
  std::optional<double> flops_ratio;
  std::optional<std::size_t> prune_count;
  DeltaMode delta_mode = DeltaMode::squared;
  std::optional<double> kappa;             // empty: default_kappa per layer
  std::optional<FisherMode> fisher_mode;   // empty: dense up to kDenseFisherCap, else factor
  double quantum = 0.0;                    // <= 0: default_quantum
  std::size_t threads = 0;                 // 0: hardware concurrency
  bool timestamps = true;                  // false writes wall_ms = 0
  std::optional<std::filesystem::path> cache_dir;
  LambdaWeights lambda{};
  std::size_t finetune_epochs = 0;
  double finetune_step = 0.05;
  std::size_t finetune_batch = 8;
  std::size_t finetune_samples = 256;
  std::uint64_t seed = 42;

  Budget budget(std::span<const DistortionCurve> curves, const ModelBundle& model) const;
  nlohmann::json to_json() const;
};

// Curve plus the pruning order it was computed under.
struct LayerCurve {
  int layer_id = 0;
  std::string name;
  double flops_per_weight = 0.0;
  std::vector<std::size_t> order;
  DistortionCurve curve;
  double kappa = 0.0;
  FisherMode fisher_mode = FisherMode::factor;
};

struct StageTiming {
  std::string name;
  double wall_ms = 0.0;
};

// Curves for every prunable layer, in layer order. Reads and fills the disk
// cache when config.cache_dir is set.
std::vector<LayerCurve> compute_curves(const ModelBundle& model, const GradientBundle& grads,
                                       const PipelineConfig& config,
                                       std::vector<StageTiming>* timings = nullptr);

// Pruning order used for a layer: prune_order(taylor_scores(W, g_avg)).
std::vector<std::size_t> layer_order(const LayerRecord& layer, const LayerGradient& grad);

// Weights zeroed at the mask zeros; masks attached in canonical form.
ModelBundle apply_allocation(const ModelBundle& model, std::span<const LayerCurve> curves,
                             const AllocationResult& allocation, std::vector<PruneMask>* masks = nullptr);

// Same ratio 1 - R in every prunable layer, k = round((1 - R) * D), using the
// Taylor order. The end-to-end baseline the allocation is compared against.
ModelBundle uniform_prune(const ModelBundle& model, std::span<const LayerCurve> curves, double flops_ratio);

struct PruneOutcome {
  ModelBundle pruned;
  std::vector<PruneMask> masks;
  AllocationResult allocation;
  std::vector<LayerCurve> curves;
  nlohmann::json report;
};

// Optional calibration inputs enable refnet-only extras: measured true
// distortion for the allocation and the uniform baseline, and finetuning.
PruneOutcome run_prune(const ModelBundle& model, const GradientBundle& grads, const PipelineConfig& config,
                       const CalibrationSet* calib = nullptr);

struct SweepRow {
  double ratio = 1.0;
  double achieved_ratio = 1.0;
  double total_delta = 0.0;
  std::optional<double> true_distortion;
};

std::vector<SweepRow> pareto_sweep(const ModelBundle& model, const GradientBundle& grads,
                                   std::span<const double> ratios, const PipelineConfig& config,
                                   const CalibrationSet* calib = nullptr);

std::string format_real(double v);  // %.17g
std::string sweep_csv(std::span<const SweepRow> rows);
std::string curves_csv(std::span<const LayerCurve> curves);

nlohmann::json to_json(const AllocationResult& allocation);
nlohmann::json to_json(const CrossTermReport& report);

// FNV-1a 64 over the byte representation; stable across platforms.
std::uint64_t content_hash(std::span<const double> values, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace dmprune
