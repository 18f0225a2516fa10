#pragma once

// First-order Taylor saliency and the nested masks derived from it.

#include <cstddef>
#include <span>
#include <vector>

#include "dmprune/model_ir.hpp"
#include "dmprune/sparse.hpp"

namespace dmprune {

// |w * g| elementwise.
Tensor taylor_scores(const Tensor& weight, const Tensor& avg_grad);

// Flat indices sorted by (score ascending, index ascending). The prefix of
// length k is the set pruned at count k, so masks nest by construction.
std::vector<std::size_t> prune_order(std::span<const double> scores);

PruneMask mask_at_count(std::span<const std::size_t> order, std::size_t k, const Shape& shape);

struct Perturbation {
  Tensor delta;                       // W_pruned - W
  std::vector<std::size_t> support;  // sorted

  SparseVector as_sparse() const;
};

Perturbation perturbation_at_count(const Tensor& weight, std::span<const std::size_t> order,
                                   std::size_t k);

// Coordinates newly pruned going from k_prev to k_next, in pruning order,
// with values -W at those positions.
SparseVector sigma_subvector(const Tensor& weight, std::span<const std::size_t> order,
                             std::size_t k_prev, std::size_t k_next);

// k = round(alpha * D), clamped to [0, D].
std::size_t count_for_ratio(double alpha, std::size_t dim);

}  // namespace dmprune
