#include "dmprune/hessian.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace dmprune {

const char* to_string(FisherMode mode) { return mode == FisherMode::dense ? "dense" : "factor"; }

FisherMode fisher_mode_from_string(const std::string& s) {
  if (s == "dense") return FisherMode::dense;
  if (s == "factor") return FisherMode::factor;
  throw Error("unknown fisher mode '" + s + "'");
}

double default_kappa(std::span<const double> grads, std::size_t rows, std::size_t dim) {
  if (rows == 0 || dim == 0) return 0.0;
  double s = 0.0;
  for (double g : grads.first(rows * dim)) s += g * g;
  return 1e-6 * s / (static_cast<double>(rows) * static_cast<double>(dim));
}

FisherMatrix FisherMatrix::build(std::span<const double> grads, std::size_t rows, std::size_t dim,
                                 double kappa, FisherMode mode, std::size_t dense_cap) {
  if (rows < 1 || dim < 1) throw Error("empirical_fisher: need N >= 1 and D >= 1");
  if (grads.size() != rows * dim) throw Error("empirical_fisher: gradient matrix size mismatch");
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw Error("empirical_fisher: kappa must be finite and >= 0");
  for (double g : grads)
    if (!std::isfinite(g)) throw Error("empirical_fisher: non-finite gradients");
  if (mode == FisherMode::dense && dim > dense_cap)
    throw Error("empirical_fisher: D=" + std::to_string(dim) + " exceeds the dense-mode cap of " +
                std::to_string(dense_cap));

  FisherMatrix f;
  f.mode_ = mode;
  f.dim_ = dim;
  f.rows_ = rows;
  f.kappa_ = kappa;
  if (mode == FisherMode::factor) {
    f.grads_.assign(grads.begin(), grads.end());
    return f;
  }

  // Upper triangle by rank-1 accumulation, then mirror.
  f.dense_.assign(dim * dim, 0.0);
  for (std::size_t n = 0; n < rows; ++n) {
    const double* g = grads.data() + n * dim;
    for (std::size_t a = 0; a < dim; ++a) {
      const double ga = g[a];
      if (ga == 0.0) continue;
      double* row = f.dense_.data() + a * dim;
      for (std::size_t b = a; b < dim; ++b) row[b] += ga * g[b];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(rows);
  for (std::size_t a = 0; a < dim; ++a) {
    for (std::size_t b = a; b < dim; ++b) {
      double v = f.dense_[a * dim + b] * inv_n;
      if (a == b) v += kappa;
      f.dense_[a * dim + b] = v;
      f.dense_[b * dim + a] = v;
    }
  }
  return f;
}

FisherMatrix FisherMatrix::build(const Tensor& per_sample_grads, double kappa, FisherMode mode,
                                 std::size_t dense_cap) {
  if (per_sample_grads.shape.size() != 2) throw Error("empirical_fisher: expected an N x D matrix");
  return build(per_sample_grads.data, static_cast<std::size_t>(per_sample_grads.shape[0]),
               static_cast<std::size_t>(per_sample_grads.shape[1]), kappa, mode, dense_cap);
}

double FisherMatrix::entry(std::size_t a, std::size_t b) const {
  if (mode_ == FisherMode::dense) return dense_[a * dim_ + b];
  double s = 0.0;
  for (std::size_t n = 0; n < rows_; ++n) s += grads_[n * dim_ + a] * grads_[n * dim_ + b];
  return s / static_cast<double>(rows_) + (a == b ? kappa_ : 0.0);
}

std::vector<double> FisherMatrix::to_dense() const {
  if (mode_ == FisherMode::dense) return dense_;
  std::vector<double> out(dim_ * dim_);
  for (std::size_t a = 0; a < dim_; ++a)
    for (std::size_t b = 0; b < dim_; ++b) out[a * dim_ + b] = entry(a, b);
  return out;
}

void FisherMatrix::check_dim(const SparseVector& v) const {
  if (v.dim != dim_) throw Error("fisher product: dimension mismatch");
  for (auto idx : v.indices)
    if (idx >= dim_) throw Error("fisher product: index out of range");
}

std::vector<double> FisherMatrix::project(const SparseVector& v) const {
  if (mode_ != FisherMode::factor) throw Error("project: only available in factor mode");
  check_dim(v);
  std::vector<double> p(rows_, 0.0);
  for (std::size_t n = 0; n < rows_; ++n) {
    const double* g = grads_.data() + n * dim_;
    double s = 0.0;
    for (std::size_t t = 0; t < v.indices.size(); ++t) s += g[v.indices[t]] * v.values[t];
    p[n] = s;
  }
  return p;
}

namespace {

// Sum of u_j v_j over common indices, accumulated in ascending index order so
// the result does not depend on argument order.
double sparse_sparse_dot(const SparseVector& u, const SparseVector& v) {
  std::vector<std::pair<std::size_t, double>> a, b;
  a.reserve(u.nnz());
  b.reserve(v.nnz());
  for (std::size_t t = 0; t < u.nnz(); ++t) a.emplace_back(u.indices[t], u.values[t]);
  for (std::size_t t = 0; t < v.nnz(); ++t) b.emplace_back(v.indices[t], v.values[t]);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i].first < b[j].first) {
      ++i;
    } else if (b[j].first < a[i].first) {
      ++j;
    } else {
      s += a[i].second * b[j].second;
      ++i;
      ++j;
    }
  }
  return s;
}

}  // namespace

double FisherMatrix::cross_form(const SparseVector& u, const SparseVector& v) const {
  check_dim(u);
  check_dim(v);
  if (u.empty() || v.empty()) return 0.0;
  if (mode_ == FisherMode::dense) {
    double s = 0.0;
    for (std::size_t t = 0; t < u.nnz(); ++t) {
      const double* row = dense_.data() + u.indices[t] * dim_;
      double r = 0.0;
      for (std::size_t q = 0; q < v.nnz(); ++q) r += row[v.indices[q]] * v.values[q];
      s += u.values[t] * r;
    }
    return s;
  }
  const auto pu = project(u);
  const auto pv = project(v);
  double s = 0.0;
  for (std::size_t n = 0; n < rows_; ++n) s += pu[n] * pv[n];
  return kappa_ * sparse_sparse_dot(u, v) + s / static_cast<double>(rows_);
}

double FisherMatrix::quad_form(const SparseVector& v) const {
  check_dim(v);
  if (v.empty()) return 0.0;
  if (mode_ == FisherMode::dense) return std::max(0.0, cross_form(v, v));
  const auto p = project(v);
  double s = 0.0;
  for (double x : p) s += x * x;
  double norm2 = 0.0;
  for (double x : v.values) norm2 += x * x;
  return kappa_ * norm2 + s / static_cast<double>(rows_);
}

}  // namespace dmprune
