#pragma once

// Reference computations for the verification suite and the unit tests.
// Written from the textbook formulas with plain loops over dense storage;
// they share no code path with the library routines they check.

#include <cmath>
#include <cstddef>
#include <vector>

#include "dmprune/model_ir.hpp"
#include "dmprune/rng.hpp"

namespace dmprune::oracle {

// kappa I + (1/N) sum_n g_n g_n^T as an explicit sum of outer products.
inline std::vector<double> fisher_dense(const std::vector<double>& g, std::size_t n, std::size_t d, double kappa) {
  std::vector<double> f(d * d, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<double> outer(d * d);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) outer[a * d + b] = g[s * d + a] * g[s * d + b];
    for (std::size_t t = 0; t < d * d; ++t) f[t] += outer[t];
  }
  for (std::size_t t = 0; t < d * d; ++t) f[t] /= static_cast<double>(n);
  for (std::size_t a = 0; a < d; ++a) f[a * d + a] += kappa;
  return f;
}

inline double bilinear(const std::vector<double>& f, const std::vector<double>& u, const std::vector<double>& v) {
  const std::size_t d = u.size();
  double s = 0.0;
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) s += u[a] * f[a * d + b] * v[b];
  return s;
}

// g.dW + 1/2 dW^T F dW where dW zeroes the first k entries of `order`.
inline double q_from_scratch(const std::vector<double>& w, const std::vector<double>& g_avg,
                             const std::vector<double>& f, const std::vector<std::size_t>& order, std::size_t k) {
  std::vector<double> dw(w.size(), 0.0);
  for (std::size_t j = 0; j < k; ++j) dw[order[j]] = -w[order[j]];
  double first = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) first += g_avg[j] * dw[j];
  return first + 0.5 * bilinear(f, dw, dw);
}

// Sorting by (score, index) through a full comparison sort of pairs.
inline std::vector<std::size_t> order_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      const auto x = idx[a], y = idx[b];
      if (scores[y] < scores[x] || (scores[y] == scores[x] && y < x)) std::swap(idx[a], idx[b]);
    }
  return idx;
}

inline std::vector<double> normals(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace dmprune::oracle
