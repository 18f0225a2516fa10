#pragma once

// Empirical Fisher surrogate for a layer Hessian:
//   F = kappa * I + (1/N) * sum_n g_n g_n^T
// built from the N per-sample gradients of the scalarized output.

#include <cstddef>
#include <span>
#include <vector>

#include "dmprune/model_ir.hpp"
#include "dmprune/sparse.hpp"

namespace dmprune {

enum class FisherMode { dense, factor };

inline constexpr std::size_t kDenseFisherCap = 4096;

const char* to_string(FisherMode mode);
FisherMode fisher_mode_from_string(const std::string& s);

// 1e-6 times the mean diagonal of G^T G / N; zero when G is zero.
double default_kappa(std::span<const double> grads, std::size_t rows, std::size_t dim);

class FisherMatrix {
 public:
  // `grads` is row-major N x D.
  static FisherMatrix build(std::span<const double> grads, std::size_t rows, std::size_t dim,
                            double kappa, FisherMode mode,
                            std::size_t dense_cap = kDenseFisherCap);
  static FisherMatrix build(const Tensor& per_sample_grads, double kappa, FisherMode mode,
                            std::size_t dense_cap = kDenseFisherCap);

  FisherMode mode() const { return mode_; }
  std::size_t dim() const { return dim_; }
  std::size_t rows() const { return rows_; }
  double kappa() const { return kappa_; }

  double entry(std::size_t a, std::size_t b) const;
  // Row-major D x D materialization; available in both modes.
  std::vector<double> to_dense() const;

  double quad_form(const SparseVector& v) const;
  double cross_form(const SparseVector& u, const SparseVector& v) const;

  // Factor mode only: g_n . v for every sample n.
  std::vector<double> project(const SparseVector& v) const;
  std::span<const double> gradient_row(std::size_t n) const {
    return std::span<const double>(grads_).subspan(n * dim_, dim_);
  }

 private:
  FisherMatrix() = default;
  void check_dim(const SparseVector& v) const;

  FisherMode mode_ = FisherMode::factor;
  std::size_t dim_ = 0;
  std::size_t rows_ = 0;
  double kappa_ = 0.0;
  std::vector<double> dense_;  // dense mode
  std::vector<double> grads_;  // factor mode
};

}  // namespace dmprune
