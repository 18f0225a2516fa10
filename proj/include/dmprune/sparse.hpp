#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmprune/error.hpp"

namespace dmprune {

// Sparse vector with unique indices. Indices need not be sorted.
struct SparseVector {
  std::size_t dim = 0;
  std::vector<std::size_t> indices;
  std::vector<double> values;

  std::size_t nnz() const { return indices.size(); }
  bool empty() const { return indices.empty(); }

  static SparseVector from_dense(std::span<const double> dense);
  std::vector<double> to_dense() const;

  // Throws if an index is out of range or repeated.
  void validate() const;
};

// Sum over the support of u of u_j * dense_j.
double sparse_dot(const SparseVector& u, std::span<const double> dense);

}  // namespace dmprune
