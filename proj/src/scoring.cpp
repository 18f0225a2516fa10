#include "dmprune/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dmprune {

SparseVector SparseVector::from_dense(std::span<const double> dense) {
  SparseVector v;
  v.dim = dense.size();
  for (std::size_t j = 0; j < dense.size(); ++j) {
    if (dense[j] != 0.0) {
      v.indices.push_back(j);
      v.values.push_back(dense[j]);
    }
  }
  return v;
}

std::vector<double> SparseVector::to_dense() const {
  std::vector<double> out(dim, 0.0);
  for (std::size_t t = 0; t < indices.size(); ++t) out[indices[t]] = values[t];
  return out;
}

void SparseVector::validate() const {
  if (indices.size() != values.size()) throw Error("sparse vector index/value length mismatch");
  std::vector<char> seen(dim, 0);
  for (auto idx : indices) {
    if (idx >= dim) throw Error("sparse vector index out of range");
    if (seen[idx]) throw Error("sparse vector has a repeated index");
    seen[idx] = 1;
  }
}

double sparse_dot(const SparseVector& u, std::span<const double> dense) {
  double s = 0.0;
  for (std::size_t t = 0; t < u.indices.size(); ++t) s += u.values[t] * dense[u.indices[t]];
  return s;
}

Tensor taylor_scores(const Tensor& weight, const Tensor& avg_grad) {
  if (weight.shape != avg_grad.shape) throw Error("taylor_scores: shape mismatch between weight and gradient");
  Tensor s(weight.shape);
  for (std::size_t j = 0; j < weight.size(); ++j) s.data[j] = std::abs(weight.data[j] * avg_grad.data[j]);
  return s;
}

std::vector<std::size_t> prune_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

PruneMask mask_at_count(std::span<const std::size_t> order, std::size_t k, const Shape& shape) {
  const std::size_t d = shape_size(shape);
  if (order.size() != d) throw Error("mask_at_count: order length does not match shape");
  if (k > d) throw Error("mask_at_count: pruned count out of range");
  PruneMask m;
  m.bits = Tensor(shape, std::vector<double>(d, 1.0));
  for (std::size_t j = 0; j < k; ++j) m.bits.data[order[j]] = 0.0;
  m.order.assign(order.begin(), order.end());
  return m;
}

SparseVector Perturbation::as_sparse() const {
  SparseVector v;
  v.dim = delta.size();
  v.indices = support;
  v.values.reserve(support.size());
  for (auto j : support) v.values.push_back(delta.data[j]);
  return v;
}

Perturbation perturbation_at_count(const Tensor& weight, std::span<const std::size_t> order,
                                   std::size_t k) {
  if (order.size() != weight.size()) throw Error("perturbation: order length does not match weight");
  if (k > weight.size()) throw Error("perturbation: pruned count out of range");
  Perturbation p;
  p.delta = Tensor(weight.shape);
  p.support.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(p.support.begin(), p.support.end());
  for (auto j : p.support) p.delta.data[j] = -weight.data[j];
  return p;
}

SparseVector sigma_subvector(const Tensor& weight, std::span<const std::size_t> order,
                             std::size_t k_prev, std::size_t k_next) {
  if (k_prev > k_next || k_next > order.size() || order.size() != weight.size())
    throw Error("sigma_subvector: counts must satisfy k_prev <= k_next <= D");
  SparseVector s;
  s.dim = weight.size();
  for (std::size_t j = k_prev; j < k_next; ++j) {
    s.indices.push_back(order[j]);
    s.values.push_back(-weight.data[order[j]]);
  }
  return s;
}

std::size_t count_for_ratio(double alpha, std::size_t dim) {
  const double k = std::round(alpha * static_cast<double>(dim));
  if (!(k > 0.0)) return 0;
  return std::min(dim, static_cast<std::size_t>(k));
}

}  // namespace dmprune
