#pragma once

// Layerwise sparsity allocation over per-layer distortion curves.
//
// Both budget modes reduce to a covering knapsack: every grid point of layer
// i costs u_i(k) budget units and the chosen points must cover at least T
// units. The state g_i[r] is the minimal summed distortion of layers 1..i
// that covers at least r units,
//   g_i[r] = min_k  delta_{i,k} + g_{i-1}[max(r - u_i(k), 0)],
// with the per-state argmin kept for the traceback.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dmprune/distortion.hpp"

namespace dmprune {

enum class BudgetMode { weight_count, flops_ratio };

const char* to_string(BudgetMode mode);

// Prune at least `count` weights in total. `costs` only feeds the reported
// FLOPs ratio; empty means one unit per weight.
struct CountBudget {
  std::size_t count = 0;
  std::vector<double> costs;
};

// Keep at most `ratio` of the prunable FLOPs. costs[i] is the FLOPs of one
// nonzero weight of curve i. quantum <= 0 selects default_quantum().
struct FlopsBudget {
  double ratio = 1.0;
  std::vector<double> costs;
  double quantum = 0.0;
};

using Budget = std::variant<CountBudget, FlopsBudget>;

struct LayerAllocation {
  int layer_id = 0;
  std::string name;
  std::size_t dim = 0;
  std::size_t k = 0;
  std::size_t grid_index = 0;
  double alpha = 0.0;
  double delta = 0.0;
};

struct TraceStep {
  int layer_id = 0;
  std::size_t state = 0;  // units still required before this layer's choice
  std::size_t grid_index = 0;
  std::size_t units = 0;
};

struct AllocationResult {
  BudgetMode budget_mode = BudgetMode::weight_count;
  double budget_spec = 0.0;  // T or R
  std::optional<double> quantum;
  std::size_t required_units = 0;
  std::vector<LayerAllocation> layers;
  double total_delta = 0.0;
  double achieved_flops_ratio = 1.0;
  std::size_t total_pruned = 0;
  std::vector<TraceStep> traceback;  // last layer first
};

// min positive cost, coarsened so that total FLOPs span at most 1e6 units.
double default_quantum(std::span<const double> costs, std::span<const DistortionCurve> curves);

AllocationResult dp_allocate_counts(std::span<const DistortionCurve> curves, std::size_t target);

AllocationResult dp_allocate_flops(std::span<const DistortionCurve> curves, std::span<const double> costs,
                                   double ratio, double quantum = 0.0);

AllocationResult dp_allocate(std::span<const DistortionCurve> curves, const Budget& budget);

// Exhaustive enumeration of the grid product; the optimality oracle.
// Ties resolve like the DP: smallest grid index at the last layer, then the
// one before, and so on.
inline constexpr std::size_t kBruteForceLimit = 10'000'000;
AllocationResult brute_force_allocate(std::span<const DistortionCurve> curves, const Budget& budget);

// The same ratio in every layer: the smallest ratio among all grid ratios for
// which each layer's smallest grid count >= ratio * D meets the budget.
AllocationResult uniform_allocate(std::span<const DistortionCurve> curves, const Budget& budget);

}  // namespace dmprune
