#pragma once

// Per-layer distortion curves. For a pruned count k with perturbation dW,
//   q_k     = g_avg . dW + 1/2 dW^T F dW
//   delta_k = q_k^2   (squared mode, default)   or |q_k| (abs mode)
// Nested masks let q_k be updated from q_{k-1} using only the newly pruned
// coordinates sigma:
//   q_k - q_{k-1} = g_avg . sigma + 1/2 sigma^T F sigma + dW_{k-1}^T F sigma

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmprune/hessian.hpp"
#include "dmprune/scoring.hpp"

namespace dmprune {

enum class DeltaMode { squared, abs };
enum class CurveMethod { direct, incremental };

const char* to_string(DeltaMode mode);
DeltaMode delta_mode_from_string(const std::string& s);
const char* to_string(CurveMethod method);

struct DistortionCurve {
  int layer_id = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> counts;
  std::vector<double> alphas;
  std::vector<double> q;
  std::vector<double> delta;
  CurveMethod method = CurveMethod::incremental;
  DeltaMode delta_mode = DeltaMode::squared;

  std::size_t points() const { return counts.size(); }
  std::size_t max_count() const { return counts.empty() ? 0 : counts.back(); }
  void validate() const;
};

// k_j = round(j * D / K) for j = 0..K with duplicates removed.
std::vector<std::size_t> count_grid(std::size_t dim, std::size_t k_points);

double delta_from_q(double q, DeltaMode mode);

double q_direct(std::span<const double> avg_grad, const FisherMatrix& fisher,
                const Perturbation& perturbation);

// One layer's inputs to curve evaluation. Non-owning.
struct LayerCurveInput {
  int layer_id = 0;
  const Tensor* weight = nullptr;
  const Tensor* avg_grad = nullptr;
  const FisherMatrix* fisher = nullptr;
};

// Recomputes q from scratch at every count.
DistortionCurve delta_curve_direct(const LayerCurveInput& in, std::span<const std::size_t> order,
                                   std::span<const std::size_t> counts,
                                   DeltaMode mode = DeltaMode::squared);

// Telescoping update over the sigma subvectors.
DistortionCurve delta_curve_incremental(const LayerCurveInput& in,
                                        std::span<const std::size_t> order,
                                        std::span<const std::size_t> counts,
                                        DeltaMode mode = DeltaMode::squared);

// Empirical check of the cross-layer independence assumption. Random masks
// of ratio alpha are drawn in both layers; the mean of
// (g_i . dW_i)(g_j . dW_j) over trials and samples is reported relative to
// the geometric mean of the per-layer squared terms.
struct CrossTermInput {
  int layer_id = 0;
  const Tensor* weight = nullptr;
  const Tensor* avg_grad = nullptr;
  // [N, D]; the averaged gradient is used as the single sample when absent.
  const Tensor* per_sample = nullptr;
};

struct CrossTermReport {
  int layer_i = 0;
  int layer_j = 0;
  double alpha = 0.0;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  double mean_cross = 0.0;
  double mean_self_i = 0.0;
  double mean_self_j = 0.0;
  double ratio = 0.0;
};

CrossTermReport cross_term_diagnostic(const CrossTermInput& a, const CrossTermInput& b, double alpha,
                                      std::size_t trials, std::uint64_t seed);

}  // namespace dmprune
