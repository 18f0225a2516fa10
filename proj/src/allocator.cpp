#include "dmprune/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace dmprune {

const char* to_string(BudgetMode mode) {
  return mode == BudgetMode::weight_count ? "weight_count" : "flops_ratio";
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Budget translated into integer units per grid point.
struct Problem {
  std::span<const DistortionCurve> curves;
  std::vector<std::vector<std::size_t>> units;
  std::vector<double> costs;
  std::size_t required = 0;
  BudgetMode mode = BudgetMode::weight_count;
  double spec = 0.0;
  std::optional<double> quantum;
};

void check_curves(std::span<const DistortionCurve> curves) {
  if (curves.empty()) throw Error("allocation needs at least one curve");
  for (const auto& c : curves) c.validate();
}

std::vector<double> costs_or_ones(std::span<const double> costs, std::size_t n) {
  if (costs.empty()) return std::vector<double>(n, 1.0);
  if (costs.size() != n) throw Error("allocation: one cost per curve is required");
  for (double c : costs)
    if (!(c >= 0.0) || !std::isfinite(c)) throw Error("allocation: costs must be finite and >= 0");
  return {costs.begin(), costs.end()};
}

double total_flops(std::span<const DistortionCurve> curves, std::span<const double> costs) {
  double t = 0.0;
  for (std::size_t i = 0; i < curves.size(); ++i) t += costs[i] * static_cast<double>(curves[i].dim);
  return t;
}

Problem count_problem(std::span<const DistortionCurve> curves, const CountBudget& b) {
  check_curves(curves);
  Problem p;
  p.curves = curves;
  p.costs = costs_or_ones(b.costs, curves.size());
  p.mode = BudgetMode::weight_count;
  p.spec = static_cast<double>(b.count);
  p.required = b.count;
  std::size_t reachable = 0;
  for (const auto& c : curves) {
    p.units.push_back(c.counts);
    reachable += c.max_count();
  }
  if (b.count > reachable)
    throw Error("infeasible: cannot prune " + std::to_string(b.count) + " weights, the curves reach " +
                std::to_string(reachable));
  return p;
}

Problem flops_problem(std::span<const DistortionCurve> curves, const FlopsBudget& b) {
  check_curves(curves);
  if (!(b.ratio > 0.0 && b.ratio <= 1.0)) throw Error("infeasible: FLOPs ratio must lie in (0, 1]");
  Problem p;
  p.curves = curves;
  p.costs = costs_or_ones(b.costs, curves.size());
  p.mode = BudgetMode::flops_ratio;
  p.spec = b.ratio;
  const double total = total_flops(curves, p.costs);
  if (!(total > 0.0)) throw Error("infeasible: prunable layers carry no FLOPs");
  const double quantum = b.quantum > 0.0 ? b.quantum : default_quantum(p.costs, curves);
  if (b.quantum > 0.0 && quantum > 0.01 * total) throw Error("quantum too coarse: exceeds 1% of total FLOPs");
  p.quantum = quantum;

  std::size_t reachable = 0;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    std::vector<std::size_t> u;
    u.reserve(curves[i].points());
    for (auto k : curves[i].counts)
      u.push_back(static_cast<std::size_t>(std::llround(static_cast<double>(k) * p.costs[i] / quantum)));
    reachable += u.back();
    p.units.push_back(std::move(u));
  }
  const double need = (1.0 - b.ratio) * total / quantum;
  const double nearest = std::round(need);
  const double units = std::abs(need - nearest) <= 1e-9 * std::max(1.0, need) ? nearest : std::ceil(need);
  p.required = static_cast<std::size_t>(std::max(0.0, units));
  if (p.required > reachable)
    throw Error("infeasible: FLOPs ratio " + std::to_string(b.ratio) + " cannot be reached");
  return p;
}

Problem make_problem(std::span<const DistortionCurve> curves, const Budget& budget) {
  if (const auto* c = std::get_if<CountBudget>(&budget)) return count_problem(curves, *c);
  return flops_problem(curves, std::get<FlopsBudget>(budget));
}

AllocationResult make_result(const Problem& p, const std::vector<std::size_t>& grid) {
  AllocationResult r;
  r.budget_mode = p.mode;
  r.budget_spec = p.spec;
  r.quantum = p.quantum;
  r.required_units = p.required;
  double total = 0.0;
  double kept = 0.0;
  double dense = 0.0;
  for (std::size_t i = 0; i < p.curves.size(); ++i) {
    const auto& c = p.curves[i];
    LayerAllocation a;
    a.layer_id = c.layer_id;
    a.dim = c.dim;
    a.grid_index = grid[i];
    a.k = c.counts[grid[i]];
    a.alpha = c.alphas[grid[i]];
    a.delta = c.delta[grid[i]];
    total = a.delta + total;  // same association as the DP recursion
    kept += p.costs[i] * static_cast<double>(c.dim - a.k);
    dense += p.costs[i] * static_cast<double>(c.dim);
    r.total_pruned += a.k;
    r.layers.push_back(std::move(a));
  }
  r.total_delta = total;
  r.achieved_flops_ratio = dense > 0.0 ? kept / dense : 1.0;
  return r;
}

AllocationResult solve_dp(const Problem& p) {
  const std::size_t layers = p.curves.size();
  const std::size_t states = p.required + 1;
  std::vector<double> prev(states, kInf), cur(states);
  prev[0] = 0.0;
  std::vector<std::vector<std::uint32_t>> arg(layers, std::vector<std::uint32_t>(states, 0));

  for (std::size_t i = 0; i < layers; ++i) {
    const auto& delta = p.curves[i].delta;
    const auto& units = p.units[i];
    auto& argrow = arg[i];
    for (std::size_t r = 0; r < states; ++r) {
      double best = kInf;
      std::uint32_t best_g = 0;
      // ascending grid index: strict < keeps the smallest k on ties
      for (std::size_t g = 0; g < delta.size(); ++g) {
        const std::size_t from = units[g] >= r ? 0 : r - units[g];
        const double v = delta[g] + prev[from];
        if (v < best) {
          best = v;
          best_g = static_cast<std::uint32_t>(g);
        }
      }
      cur[r] = best;
      argrow[r] = best_g;
    }
    std::swap(prev, cur);
  }
  if (!std::isfinite(prev[p.required])) throw Error("infeasible: no grid allocation meets the budget");

  std::vector<std::size_t> grid(layers, 0);
  std::vector<TraceStep> trace;
  std::size_t r = p.required;
  for (std::size_t i = layers; i-- > 0;) {
    const std::size_t g = arg[i][r];
    grid[i] = g;
    trace.push_back({p.curves[i].layer_id, r, g, p.units[i][g]});
    r = p.units[i][g] >= r ? 0 : r - p.units[i][g];
  }
  auto result = make_result(p, grid);
  result.traceback = std::move(trace);
  return result;
}

std::size_t covered_units(const Problem& p, const std::vector<std::size_t>& grid) {
  std::size_t u = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) u += p.units[i][grid[i]];
  return u;
}

}  // namespace

double default_quantum(std::span<const double> costs, std::span<const DistortionCurve> curves) {
  double min_cost = kInf;
  double total = 0.0;
  for (std::size_t i = 0; i < costs.size(); ++i) {
    if (costs[i] > 0.0) min_cost = std::min(min_cost, costs[i]);
    if (i < curves.size()) total += costs[i] * static_cast<double>(curves[i].dim);
  }
  if (!std::isfinite(min_cost)) throw Error("infeasible: prunable layers carry no FLOPs");
  return std::max(min_cost, total / 1e6);
}

AllocationResult dp_allocate_counts(std::span<const DistortionCurve> curves, std::size_t target) {
  return solve_dp(count_problem(curves, CountBudget{target, {}}));
}

AllocationResult dp_allocate_flops(std::span<const DistortionCurve> curves, std::span<const double> costs,
                                   double ratio, double quantum) {
  return solve_dp(flops_problem(curves, FlopsBudget{ratio, {costs.begin(), costs.end()}, quantum}));
}

AllocationResult dp_allocate(std::span<const DistortionCurve> curves, const Budget& budget) {
  return solve_dp(make_problem(curves, budget));
}

AllocationResult brute_force_allocate(std::span<const DistortionCurve> curves, const Budget& budget) {
  const Problem p = make_problem(curves, budget);
  const std::size_t layers = curves.size();
  double space = 1.0;
  for (const auto& c : curves) space *= static_cast<double>(c.points());
  if (space > static_cast<double>(kBruteForceLimit)) throw Error("brute force: search space too large");

  std::vector<std::size_t> grid(layers, 0);
  std::vector<std::size_t> best_grid;
  double best = kInf;
  // Reverse-lexicographic comparison from the last layer mirrors the DP
  // traceback, which fixes the last layer first with the smallest index.
  auto rev_less = [&](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    for (std::size_t i = layers; i-- > 0;)
      if (a[i] != b[i]) return a[i] < b[i];
    return false;
  };
  while (true) {
    if (covered_units(p, grid) >= p.required) {
      double total = 0.0;
      for (std::size_t i = 0; i < layers; ++i) total = curves[i].delta[grid[i]] + total;
      if (total < best || (total == best && rev_less(grid, best_grid))) {
        best = total;
        best_grid = grid;
      }
    }
    std::size_t i = 0;
    while (i < layers && ++grid[i] == curves[i].points()) grid[i++] = 0;
    if (i == layers) break;
  }
  if (best_grid.empty()) throw Error("infeasible: no grid allocation meets the budget");
  return make_result(p, best_grid);
}

AllocationResult uniform_allocate(std::span<const DistortionCurve> curves, const Budget& budget) {
  const Problem p = make_problem(curves, budget);
  std::vector<double> ratios;
  for (const auto& c : curves) ratios.insert(ratios.end(), c.alphas.begin(), c.alphas.end());
  std::sort(ratios.begin(), ratios.end());
  ratios.erase(std::unique(ratios.begin(), ratios.end()), ratios.end());

  for (double alpha : ratios) {
    std::vector<std::size_t> grid;
    for (const auto& c : curves) {
      const double want = alpha * static_cast<double>(c.dim);
      std::size_t g = 0;
      // smallest grid count >= alpha * D, with a little slack for rounding
      while (g + 1 < c.points() && static_cast<double>(c.counts[g]) < want - 1e-9) ++g;
      grid.push_back(g);
    }
    if (covered_units(p, grid) >= p.required) return make_result(p, grid);
  }
  throw Error("infeasible: no uniform allocation meets the budget");
}

}  // namespace dmprune
