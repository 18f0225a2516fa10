#include "dmprune/distortion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmprune/rng.hpp"

namespace dmprune {

const char* to_string(DeltaMode mode) { return mode == DeltaMode::squared ? "squared" : "abs"; }

DeltaMode delta_mode_from_string(const std::string& s) {
  if (s == "squared") return DeltaMode::squared;
  if (s == "abs") return DeltaMode::abs;
  throw Error("unknown delta mode '" + s + "'");
}

const char* to_string(CurveMethod method) {
  return method == CurveMethod::direct ? "direct" : "incremental";
}

void DistortionCurve::validate() const {
  const std::size_t n = counts.size();
  if (n == 0 || alphas.size() != n || q.size() != n || delta.size() != n)
    throw Error("distortion curve: inconsistent lengths");
  if (counts[0] != 0 || q[0] != 0.0 || delta[0] != 0.0)
    throw Error("distortion curve must start at count 0 with zero distortion");
  for (std::size_t j = 1; j < n; ++j)
    if (counts[j] <= counts[j - 1]) throw Error("distortion curve counts must strictly increase");
  if (counts.back() > dim) throw Error("distortion curve count exceeds layer size");
  for (double d : delta)
    if (!(d >= 0.0) || !std::isfinite(d)) throw Error("distortion curve: delta must be finite and >= 0");
}

std::vector<std::size_t> count_grid(std::size_t dim, std::size_t k_points) {
  if (k_points == 0) throw Error("count_grid: K must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j <= k_points; ++j) {
    // round(j*D/K), halves rounded up, in exact integer arithmetic
    const std::size_t k = (2 * j * dim + k_points) / (2 * k_points);
    if (out.empty() || out.back() != k) out.push_back(k);
  }
  return out;
}

double delta_from_q(double q, DeltaMode mode) { return mode == DeltaMode::squared ? q * q : std::abs(q); }

double q_direct(std::span<const double> avg_grad, const FisherMatrix& fisher,
                const Perturbation& perturbation) {
  if (avg_grad.size() != perturbation.delta.size() || fisher.dim() != avg_grad.size())
    throw Error("q_direct: dimension mismatch");
  const SparseVector dw = perturbation.as_sparse();
  return sparse_dot(dw, avg_grad) + 0.5 * fisher.quad_form(dw);
}

namespace {

void check_inputs(const LayerCurveInput& in, std::span<const std::size_t> order,
                  std::span<const std::size_t> counts) {
  if (!in.weight || !in.avg_grad || !in.fisher) throw Error("distortion curve: missing layer input");
  const std::size_t d = in.weight->size();
  if (in.avg_grad->size() != d || in.fisher->dim() != d || order.size() != d)
    throw Error("distortion curve: dimension mismatch");
  if (counts.empty() || counts[0] != 0) throw Error("distortion curve: counts must start at 0");
  for (std::size_t j = 1; j < counts.size(); ++j)
    if (counts[j] <= counts[j - 1]) throw Error("distortion curve: counts must be nested (strictly increasing)");
  if (counts.back() > d) throw Error("distortion curve: count exceeds layer size");
}

DistortionCurve empty_curve(const LayerCurveInput& in, std::span<const std::size_t> counts,
                            CurveMethod method, DeltaMode mode) {
  DistortionCurve c;
  c.layer_id = in.layer_id;
  c.dim = in.weight->size();
  c.counts.assign(counts.begin(), counts.end());
  c.alphas.reserve(counts.size());
  for (auto k : counts) c.alphas.push_back(static_cast<double>(k) / static_cast<double>(c.dim));
  c.q.assign(counts.size(), 0.0);
  c.delta.assign(counts.size(), 0.0);
  c.method = method;
  c.delta_mode = mode;
  return c;
}

}  // namespace

DistortionCurve delta_curve_direct(const LayerCurveInput& in, std::span<const std::size_t> order,
                                   std::span<const std::size_t> counts, DeltaMode mode) {
  check_inputs(in, order, counts);
  auto c = empty_curve(in, counts, CurveMethod::direct, mode);
  for (std::size_t j = 1; j < counts.size(); ++j) {
    const auto p = perturbation_at_count(*in.weight, order, counts[j]);
    c.q[j] = q_direct(in.avg_grad->data, *in.fisher, p);
    c.delta[j] = delta_from_q(c.q[j], mode);
  }
  return c;
}

DistortionCurve delta_curve_incremental(const LayerCurveInput& in,
                                        std::span<const std::size_t> order,
                                        std::span<const std::size_t> counts, DeltaMode mode) {
  check_inputs(in, order, counts);
  auto c = empty_curve(in, counts, CurveMethod::incremental, mode);
  const FisherMatrix& f = *in.fisher;
  const auto g = std::span<const double>(in.avg_grad->data);
  const bool factor = f.mode() == FisherMode::factor;
  const double inv_n = 1.0 / static_cast<double>(f.rows());

  // Accumulated perturbation dW_{k-1}: its sparse form for dense mode, its
  // per-sample projections g_n . dW_{k-1} for factor mode.
  SparseVector prev;
  prev.dim = c.dim;
  std::vector<double> prev_proj(f.rows(), 0.0);

  double q = 0.0;
  for (std::size_t j = 1; j < counts.size(); ++j) {
    const SparseVector sigma = sigma_subvector(*in.weight, order, counts[j - 1], counts[j]);
    const double first = sparse_dot(sigma, g);
    double second = 0.0;
    double cross = 0.0;
    if (factor) {
      const auto proj = f.project(sigma);
      double norm2 = 0.0;
      for (double v : sigma.values) norm2 += v * v;
      double ss = 0.0, sp = 0.0;
      for (std::size_t n = 0; n < proj.size(); ++n) {
        ss += proj[n] * proj[n];
        sp += prev_proj[n] * proj[n];
        prev_proj[n] += proj[n];
      }
      // supports of dW_{k-1} and sigma are disjoint, so the kappa term of
      // the cross product vanishes
      second = 0.5 * (f.kappa() * norm2 + ss * inv_n);
      cross = sp * inv_n;
    } else {
      second = 0.5 * f.quad_form(sigma);
      cross = f.cross_form(prev, sigma);
      prev.indices.insert(prev.indices.end(), sigma.indices.begin(), sigma.indices.end());
      prev.values.insert(prev.values.end(), sigma.values.begin(), sigma.values.end());
    }
    q += first + second + cross;
    c.q[j] = q;
    c.delta[j] = delta_from_q(q, mode);
  }
  return c;
}

CrossTermReport cross_term_diagnostic(const CrossTermInput& a, const CrossTermInput& b, double alpha,
                                      std::size_t trials, std::uint64_t seed) {
  if (a.layer_id == b.layer_id) throw Error("cross_term_diagnostic: the same layer was supplied twice");
  if (!a.weight || !a.avg_grad || !b.weight || !b.avg_grad)
    throw Error("cross_term_diagnostic: missing layer input");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("cross_term_diagnostic: alpha must lie in [0, 1]");

  auto rows_of = [](const CrossTermInput& in) -> std::size_t {
    return in.per_sample ? static_cast<std::size_t>(in.per_sample->shape[0]) : 1;
  };
  auto grad_row = [](const CrossTermInput& in, std::size_t n) -> std::span<const double> {
    if (!in.per_sample) return in.avg_grad->data;
    const std::size_t d = in.avg_grad->size();
    return std::span<const double>(in.per_sample->data).subspan(n * d, d);
  };
  const std::size_t rows = rows_of(a);
  if (rows_of(b) != rows) throw Error("cross_term_diagnostic: layers have different sample counts");

  CrossTermReport r;
  r.layer_i = a.layer_id;
  r.layer_j = b.layer_id;
  r.alpha = alpha;
  r.trials = trials;
  r.seed = seed;

  Rng rng(seed);
  auto random_perturbation = [&](const Tensor& w) {
    const std::size_t d = w.size();
    std::vector<std::size_t> perm(d);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t t = d; t > 1; --t) std::swap(perm[t - 1], perm[rng.index(t)]);
    return perturbation_at_count(w, perm, count_for_ratio(alpha, d)).as_sparse();
  };

  double cross = 0.0, self_a = 0.0, self_b = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto dwa = random_perturbation(*a.weight);
    const auto dwb = random_perturbation(*b.weight);
    for (std::size_t n = 0; n < rows; ++n) {
      const double ya = sparse_dot(dwa, grad_row(a, n));
      const double yb = sparse_dot(dwb, grad_row(b, n));
      cross += ya * yb;
      self_a += ya * ya;
      self_b += yb * yb;
    }
  }
  const double denom = trials == 0 ? 0.0 : static_cast<double>(trials * rows);
  if (denom > 0.0) {
    r.mean_cross = cross / denom;
    r.mean_self_i = self_a / denom;
    r.mean_self_j = self_b / denom;
  }
  const double geo = std::sqrt(r.mean_self_i * r.mean_self_j);
  r.ratio = geo > 0.0 ? r.mean_cross / geo : 0.0;
  return r;
}

}  // namespace dmprune
