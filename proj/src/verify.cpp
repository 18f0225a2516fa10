#include "dmprune/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <optional>
#include <sstream>

#include "dmprune/allocator.hpp"
#include "dmprune/cli.hpp"
#include "dmprune/distortion.hpp"
#include "dmprune/hessian.hpp"
#include "dmprune/oracles.hpp"
#include "dmprune/pipeline.hpp"
#include "dmprune/refnet.hpp"
#include "dmprune/rng.hpp"
#include "dmprune/scoring.hpp"

namespace dmprune {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string sci(double v) { return fmt("%.3g", v); }

CriterionResult timed(const char* name, const std::function<CriterionResult()>& body) {
  const auto t0 = Clock::now();
  CriterionResult r;
  try {
    r = body();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.name = name;
  r.seconds = seconds_since(t0);
  return r;
}

DistortionCurve random_curve(Rng& rng, int id, std::size_t k_points, bool integer_deltas) {
  DistortionCurve c;
  c.layer_id = id;
  c.dim = 1 + rng.index(40);
  c.counts = count_grid(c.dim, k_points);
  for (auto k : c.counts) {
    c.alphas.push_back(static_cast<double>(k) / static_cast<double>(c.dim));
    const double d = k == 0 ? 0.0 : (integer_deltas ? static_cast<double>(rng.index(6)) : rng.uniform(0.0, 5.0));
    c.delta.push_back(d);
    c.q.push_back(k == 0 ? 0.0 : std::sqrt(d));
  }
  return c;
}

std::vector<double> mean_rows(const std::vector<double>& g, std::size_t n, std::size_t d) {
  std::vector<double> m(d, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < d; ++j) m[j] += g[s * d + j];
  for (double& x : m) x /= static_cast<double>(n);
  return m;
}

SparseVector random_sparse(Rng& rng, std::size_t dim) {
  SparseVector v;
  v.dim = dim;
  const std::size_t nnz = 1 + rng.index(dim);
  std::vector<std::size_t> idx(dim);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t j = 0; j < nnz; ++j) std::swap(idx[j], idx[j + rng.index(dim - j)]);
  for (std::size_t j = 0; j < nnz; ++j) {
    v.indices.push_back(idx[j]);
    v.values.push_back(rng.normal());
  }
  return v;
}

struct DemoSetup {
  RefNetSpec spec;
  RefNetParams params;
  CalibrationSet calib;
  ModelBundle model;
  GradientBundle grads;
  Scalarizer scalarizer;
};

DemoSetup demo_setup(std::uint64_t seed) {
  RefNetSpec spec;
  spec.seed = seed;
  auto params = init_params(spec);
  auto calib = synth_calibration(spec, 64, seed);
  Scalarizer sc(spec, LambdaWeights{});
  auto grads = build_gradient_bundle(spec, params, calib, sc);
  auto model = to_bundle(spec, params);
  return DemoSetup{spec, std::move(params), std::move(calib), std::move(model), std::move(grads), sc};
}

bool read_file(const std::filesystem::path& p, std::string& out) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return false;
  out.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return true;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("spearman: need two equal-length samples of size >= 2");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("linear_fit: need at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit f;
  f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  f.intercept = my - f.slope * mx;
  f.r2 = (sxx > 0.0 && syy > 0.0) ? (sxy * sxy) / (sxx * syy) : 0.0;
  return f;
}

CriterionResult check_dp_optimality(const VerifyOptions& opt) {
  Rng rng(opt.seed ^ 0xD0u);
  std::size_t mismatches = 0, alloc_mismatches = 0, integer_cases = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t layers = 1 + rng.index(4);
    const std::size_t k_points = 1 + rng.index(8);
    const bool integer = inst % 4 == 0;
    std::vector<DistortionCurve> curves;
    std::size_t reach = 0;
    for (std::size_t i = 0; i < layers; ++i) {
      curves.push_back(random_curve(rng, static_cast<int>(i), k_points, integer));
      reach += curves.back().dim;
    }
    Budget budget;
    if (inst % 2 == 0) {
      budget = CountBudget{rng.index(reach + 1), {}};
    } else {
      std::vector<double> costs;
      for (std::size_t i = 0; i < layers; ++i) costs.push_back(static_cast<double>(1 + rng.index(16)));
      budget = FlopsBudget{rng.uniform(0.05, 1.0), costs, 0.0};
    }
    const auto dp = dp_allocate(curves, budget);
    const auto bf = brute_force_allocate(curves, budget);
    if (dp.total_delta != bf.total_delta) ++mismatches;
    if (integer) {
      ++integer_cases;
      for (std::size_t i = 0; i < layers; ++i)
        if (dp.layers[i].k != bf.layers[i].k) {
          ++alloc_mismatches;
          break;
        }
    }
  }
  CriterionResult r;
  r.passed = mismatches == 0 && alloc_mismatches == 0;
  r.detail = "200 instances, both budget modes; total_delta mismatches = " + std::to_string(mismatches) +
             ", allocation mismatches on integer deltas = " + std::to_string(alloc_mismatches) + "/" +
             std::to_string(integer_cases);
  return r;
}

CriterionResult check_incremental_equivalence(const VerifyOptions& opt) {
  Rng rng(opt.seed ^ 0x1Cu);
  double worst = 0.0;
  for (int layer = 0; layer < 20; ++layer) {
    const std::size_t d = layer == 0 ? 512 : 1 + rng.index(512);
    const std::size_t n = 1 + rng.index(32);
    Tensor w({static_cast<std::int64_t>(d)}, oracle::normals(rng, d));
    const auto g = oracle::normals(rng, n * d, 0.1);
    Tensor gavg({static_cast<std::int64_t>(d)}, mean_rows(g, n, d));
    const auto order = prune_order(taylor_scores(w, gavg).data);
    const auto counts = count_grid(d, 16);
    const double kappa = default_kappa(g, n, d);
    for (auto mode : {FisherMode::dense, FisherMode::factor}) {
      const auto f = FisherMatrix::build(g, n, d, kappa, mode);
      LayerCurveInput in{layer, &w, &gavg, &f};
      const auto direct = delta_curve_direct(in, order, counts);
      const auto inc = delta_curve_incremental(in, order, counts);
      for (std::size_t j = 0; j < counts.size(); ++j) {
        const double diff = std::abs(inc.q[j] - direct.q[j]);
        if (diff == 0.0) continue;
        worst = std::max(worst, diff / std::abs(direct.q[j]));
      }
    }
  }
  CriterionResult r;
  r.passed = worst <= 1e-9;
  r.detail = "20 layers, K = 16, dense and factor Fisher; max relative q deviation = " + sci(worst) + " (limit 1e-9)";
  return r;
}

CriterionResult check_fisher_oracle(const VerifyOptions& opt) {
  Rng rng(opt.seed ^ 0xF1u);
  double worst_entry = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = 1 + rng.index(64);
    const std::size_t n = 1 + rng.index(16);
    const auto g = oracle::normals(rng, n * d);
    const double kappa = rng.uniform(0.0, 0.1);
    const auto ref = oracle::fisher_dense(g, n, d, kappa);
    for (auto mode : {FisherMode::dense, FisherMode::factor}) {
      const auto got = FisherMatrix::build(g, n, d, kappa, mode).to_dense();
      for (std::size_t t = 0; t < ref.size(); ++t) worst_entry = std::max(worst_entry, std::abs(got[t] - ref[t]));
    }
  }

  double worst_quad = 0.0, worst_cross = 0.0;
  std::size_t vectors = 0;
  for (int m = 0; m < 10; ++m) {
    const std::size_t d = 8 + rng.index(120);
    const std::size_t n = 1 + rng.index(32);
    const auto g = oracle::normals(rng, n * d);
    const double kappa = default_kappa(g, n, d);
    const auto dense = FisherMatrix::build(g, n, d, kappa, FisherMode::dense);
    const auto factor = FisherMatrix::build(g, n, d, kappa, FisherMode::factor);
    for (int v = 0; v < 100; ++v, ++vectors) {
      const auto a = random_sparse(rng, d);
      const auto b = random_sparse(rng, d);
      const double qa = dense.quad_form(a);
      const double qb = dense.quad_form(b);
      worst_quad = std::max(worst_quad, std::abs(factor.quad_form(a) - qa) / qa);
      // Cauchy-Schwarz bounds |u^T F v| by sqrt(uFu vFv), the natural scale of the cross product
      const double scale = std::sqrt(qa * qb);
      worst_cross = std::max(worst_cross, std::abs(factor.cross_form(a, b) - dense.cross_form(a, b)) / scale);
    }
  }
  CriterionResult r;
  r.passed = worst_entry <= 1e-12 && worst_quad <= 1e-10 && worst_cross <= 1e-10;
  r.detail = "max |F - oracle| = " + sci(worst_entry) + " (limit 1e-12); factor vs dense over " +
             std::to_string(vectors) + " sparse vectors: quad rel = " + sci(worst_quad) + ", cross rel = " +
             sci(worst_cross) + " (limit 1e-10)";
  return r;
}

CriterionResult check_gradcheck(const VerifyOptions& opt) {
  constexpr double h = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  std::string worst_where;
  for (std::uint64_t s = 0; s < 3; ++s) {
    RefNetSpec spec;
    spec.seed = opt.seed + s;
    auto params = init_params(spec);
    const auto sc = Scalarizer::random_probe(spec, LambdaWeights{}, spec.seed + 100);
    Rng rng(spec.seed + 200);
    std::vector<double> x;
    for (int attempt = 0;; ++attempt) {
      x = oracle::normals(rng, spec.input_size());
      if (min_abs_preactivation(spec, params, x) > 1e-4) break;
      if (attempt > 50) throw Error("gradcheck: could not draw an input away from relu kinks");
    }
    const auto grad = backward_scalarized(spec, params, x, sc);
    auto u = [&](const RefNetParams& p) { return sc(forward(spec, p, x)); };
    for (int which = 0; which < 2; ++which) {
      for (std::size_t layer = 0; layer < spec.layer_count(); ++layer) {
        auto& t = which == 0 ? params.weights[layer] : params.biases[layer];
        const auto& gt = which == 0 ? grad.weights[layer] : grad.biases[layer];
        for (std::size_t j = 0; j < t.size(); ++j) {
          const double w0 = t.data[j];
          t.data[j] = w0 + h;
          const double up = u(params);
          t.data[j] = w0 - h;
          const double down = u(params);
          t.data[j] = w0;
          const double fd = (up - down) / (2.0 * h);
          const double err = std::abs(gt.data[j] - fd) / (1.0 + std::abs(fd));
          ++checked;
          if (err > worst) {
            worst = err;
            worst_where = spec.layer_name(layer) + (which == 0 ? ".weight" : ".bias");
          }
        }
      }
    }
  }
  CriterionResult r;
  r.passed = worst <= 1e-6;
  r.detail = "3 seeds, " + std::to_string(checked) + " coordinates over every layer; max |g - fd| / (1 + |fd|) = " +
             sci(worst) + (worst_where.empty() ? "" : " at " + worst_where) + " (limit 1e-6)";
  return r;
}

CriterionResult check_fidelity(const VerifyOptions& opt) {
  const auto demo = demo_setup(opt.seed);
  PipelineConfig cfg;
  cfg.threads = opt.threads;
  const auto curves = compute_curves(demo.model, demo.grads, cfg);

  std::vector<double> predicted, measured;
  std::vector<std::size_t> layer_start;
  std::ostringstream csv;
  csv << "layer_id,k,alpha,predicted_delta,true_distortion\n";
  for (const auto& lc : curves) {
    const auto& c = lc.curve;
    const auto layer = static_cast<std::size_t>(lc.layer_id);
    layer_start.push_back(predicted.size());
    for (std::size_t j = 0; j < c.points(); ++j) {
      if (c.alphas[j] > 0.5) break;
      auto pruned = demo.params;
      for (std::size_t t = 0; t < c.counts[j]; ++t) pruned.weights[layer].data[lc.order[t]] = 0.0;
      const double td = true_distortion(demo.spec, demo.params, pruned, demo.calib, demo.scalarizer);
      predicted.push_back(c.delta[j]);
      measured.push_back(td);
      csv << c.layer_id << ',' << c.counts[j] << ',' << format_real(c.alphas[j]) << ',' << format_real(c.delta[j])
          << ',' << format_real(td) << '\n';
    }
  }
  std::filesystem::create_directories(opt.out_dir);
  const auto table = opt.out_dir / "fidelity.csv";
  std::ofstream(table, std::ios::trunc) << csv.str();

  const double rho = spearman(predicted, measured);
  std::string per_layer;
  layer_start.push_back(predicted.size());
  for (std::size_t i = 0; i + 1 < layer_start.size(); ++i) {
    const auto b = predicted.begin() + static_cast<std::ptrdiff_t>(layer_start[i]);
    const auto e = predicted.begin() + static_cast<std::ptrdiff_t>(layer_start[i + 1]);
    const auto mb = measured.begin() + static_cast<std::ptrdiff_t>(layer_start[i]);
    const auto me = measured.begin() + static_cast<std::ptrdiff_t>(layer_start[i + 1]);
    per_layer += (i == 0 ? "" : ", ") + curves[i].name + " " + fmt("%.2f", spearman({b, e}, {mb, me}));
  }
  CriterionResult r;
  r.passed = rho >= 0.8;
  r.detail = "Spearman(predicted delta, true distortion) = " + fmt("%.4f", rho) + " over " +
             std::to_string(predicted.size()) + " points pooled across layers (min 0.8); within layers: " + per_layer +
             "; table " + table.string();
  return r;
}

CriterionResult check_end_to_end(const VerifyOptions& opt) {
  const auto demo = demo_setup(opt.seed);
  std::size_t wins = 0;
  bool ratio_ok = true;
  std::ostringstream detail;
  for (double R : {0.7, 0.5, 0.3}) {
    PipelineConfig cfg;
    cfg.threads = opt.threads;
    cfg.flops_ratio = R;
    cfg.timestamps = false;
    const auto out = run_prune(demo.model, demo.grads, cfg, &demo.calib);
    const auto& ev = out.report.at("diagnostics").at("evaluation");
    const double dp_true = ev.at("true_distortion").get<double>();
    const double uni_true = ev.at("uniform_true_distortion").get<double>();
    const double achieved = out.allocation.achieved_flops_ratio;
    // llround of k * c / quantum moves each layer by at most half a quantum
    const double slack = 0.5 * static_cast<double>(out.allocation.layers.size()) * out.allocation.quantum.value_or(0.0) /
                         flops_of(demo.model);
    if (achieved > R + slack + 1e-12) ratio_ok = false;
    if (dp_true <= uni_true) ++wins;
    detail << "R=" << R << ": achieved " << fmt("%.4f", achieved) << ", true " << sci(dp_true) << " vs uniform "
           << sci(uni_true) << " (uniform ratio " << fmt("%.4f", ev.at("uniform_flops_ratio").get<double>())
           << "); ";
  }
  CriterionResult r;
  r.passed = ratio_ok && wins >= 2;
  r.detail = detail.str() + "dominates at " + std::to_string(wins) + "/3 (min 2), ratio within slack: " +
             (ratio_ok ? "yes" : "no");
  return r;
}

CriterionResult check_finetune_recovery(const VerifyOptions& opt) {
  const auto demo = demo_setup(opt.seed);
  PipelineConfig cfg;
  cfg.threads = opt.threads;
  cfg.flops_ratio = 0.5;
  cfg.timestamps = false;
  cfg.finetune_epochs = 50;
  cfg.seed = opt.seed;
  const auto out = run_prune(demo.model, demo.grads, cfg, &demo.calib);
  const auto& ev = out.report.at("diagnostics").at("evaluation");
  const double before = ev.at("true_distortion").get<double>();
  const double after = ev.at("finetuned_true_distortion").get<double>();
  const double reduction = before > 0.0 ? 1.0 - after / before : 0.0;
  CriterionResult r;
  r.passed = reduction >= 0.5;
  r.detail = "R=0.5, 50 epochs: true distortion " + sci(before) + " -> " + sci(after) + ", reduction " +
             fmt("%.1f", 100.0 * reduction) + "% (min 50%), epochs run " +
             std::to_string(ev.at("finetune").at("epochs_run").get<std::size_t>());
  return r;
}

// Times every job once per round, sweeping the ladder in alternating
// direction. Returns one row of timings per round.
std::vector<std::vector<double>> interleaved_rounds(const std::vector<std::function<void()>>& jobs, int rounds) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(rounds), std::vector<double>(jobs.size()));
  for (int r = 0; r < rounds; ++r) {
    for (std::size_t step = 0; step < jobs.size(); ++step) {
      const std::size_t i = r % 2 == 0 ? step : jobs.size() - 1 - step;
      const auto t0 = Clock::now();
      jobs[i]();
      out[static_cast<std::size_t>(r)][i] = seconds_since(t0);
    }
  }
  return out;
}

std::vector<double> fastest(const std::vector<std::vector<double>>& rounds) {
  std::vector<double> best(rounds.front());
  for (const auto& row : rounds)
    for (std::size_t i = 0; i < row.size(); ++i) best[i] = std::min(best[i], row[i]);
  return best;
}

CriterionResult check_complexity(const VerifyOptions& opt) {
  Rng rng(opt.seed ^ 0xC0u);

  struct CurveJob {
    Tensor w, gavg;
    std::vector<double> g;
    std::optional<FisherMatrix> f;
    std::vector<std::size_t> order, counts;
  };
  const std::size_t n = 16;
  const std::size_t dims[] = {64, 128, 256, 512};
  std::vector<CurveJob> cj(std::size(dims));
  std::vector<std::function<void()>> curve_jobs;
  std::vector<double> log_d;
  for (std::size_t i = 0; i < std::size(dims); ++i) {
    const std::size_t d = dims[i];
    auto& j = cj[i];
    j.w = Tensor({static_cast<std::int64_t>(d)}, oracle::normals(rng, d));
    j.g = oracle::normals(rng, n * d, 0.1);
    j.gavg = Tensor({static_cast<std::int64_t>(d)}, mean_rows(j.g, n, d));
    j.f = FisherMatrix::build(j.g, n, d, default_kappa(j.g, n, d), FisherMode::dense);
    j.order = prune_order(taylor_scores(j.w, j.gavg).data);
    j.counts = count_grid(d, d);
    curve_jobs.push_back([&j] {
      LayerCurveInput in{0, &j.w, &j.gavg, &*j.f};
      (void)delta_curve_incremental(in, j.order, j.counts);
    });
    log_d.push_back(std::log(static_cast<double>(d)));
  }
  auto log_t = fastest(interleaved_rounds(curve_jobs, 25));
  for (double& t : log_t) t = std::log(t);
  const auto exp_fit = linear_fit(log_d, log_t);

  std::vector<DistortionCurve> curves;
  for (int i = 0; i < 8; ++i) {
    DistortionCurve c;
    c.layer_id = i;
    c.dim = 40000;
    c.counts = count_grid(c.dim, 20);
    for (auto k : c.counts) {
      c.alphas.push_back(static_cast<double>(k) / static_cast<double>(c.dim));
      c.q.push_back(k == 0 ? 0.0 : rng.uniform());
      c.delta.push_back(c.q.back() * c.q.back());
    }
    curves.push_back(std::move(c));
  }
  std::vector<double> ts;
  std::vector<std::function<void()>> dp_jobs;
  for (std::size_t t = 20000; t <= 160000; t += 20000) {
    ts.push_back(static_cast<double>(t));
    dp_jobs.push_back([&curves, t] { (void)dp_allocate_counts(curves, t); });
  }
  // A whole ladder takes a fraction of a second, so a stall on a shared host
  // spoils single rounds; the median round fit ignores those.
  std::vector<double> r2;
  for (const auto& row : interleaved_rounds(dp_jobs, 25)) r2.push_back(linear_fit(ts, row).r2);
  std::nth_element(r2.begin(), r2.begin() + 12, r2.end());
  const double dp_r2 = r2[12];

  CriterionResult r;
  r.passed = exp_fit.slope <= 2.3 && dp_r2 >= 0.95;
  r.detail = "incremental curve time exponent = " + fmt("%.3f", exp_fit.slope) +
             " over D in {64,128,256,512} (max 2.3); DP time vs T linear fit R^2 = " + fmt("%.4f", dp_r2) +
             " (median of 25 rounds) over T in [2e4, 1.6e5] (min 0.95)";
  return r;
}

CriterionResult check_reproducibility(const VerifyOptions& opt) {
  const auto root = opt.out_dir / "repro";
  std::filesystem::remove_all(root);
  const char* files[] = {"model.dmb", "calib.dmb", "grads.dmb", "curves.csv", "allocation.json", "pruned.dmb",
                         "report.json"};
  const std::string seed = std::to_string(opt.seed);
  for (const char* run : {"run1", "run2"}) {
    const auto dir = root / run;
    const auto cache = (root / "cache").string();
    auto p = [&](const char* f) { return (dir / f).string(); };
    const std::vector<std::vector<std::string>> steps = {
        {"demo-export", "--seed", seed, "--out", dir.string()},
        {"grad", "--model", p("model.dmb"), "--calib", p("calib.dmb"), "--out", p("grads.dmb")},
        {"curves", "--model", p("model.dmb"), "--grads", p("grads.dmb"), "--out", p("curves.csv"), "--cache-dir",
         cache},
        {"allocate", "--model", p("model.dmb"), "--grads", p("grads.dmb"), "--flops-ratio", "0.5", "--out",
         p("allocation.json"), "--cache-dir", cache},
        {"prune", "--model", p("model.dmb"), "--grads", p("grads.dmb"), "--calib", p("calib.dmb"), "--flops-ratio",
         "0.5", "--out", p("pruned.dmb"), "--report", p("report.json"), "--cache-dir", cache},
    };
    for (auto args : steps) {
      if (args[0] != "demo-export") args.insert(args.end(), {"--seed", seed});
      args.push_back("--no-timestamps");
      std::ostringstream out, err;
      const int code = run_cli(args, out, err);
      if (code != 0) {
        CriterionResult r;
        r.detail = "'" + args[0] + "' exited with " + std::to_string(code) + ": " + err.str();
        return r;
      }
    }
  }
  std::vector<std::string> differing;
  for (const char* f : files) {
    std::string a, b;
    if (!read_file(root / "run1" / f, a) || !read_file(root / "run2" / f, b) || a != b) differing.emplace_back(f);
  }
  CriterionResult r;
  r.passed = differing.empty();
  if (r.passed) {
    r.detail = "demo-export, grad, curves, allocate, prune run twice; " + std::to_string(std::size(files)) +
               " outputs byte-identical";
  } else {
    r.detail = "outputs differ:";
    for (const auto& f : differing) r.detail += " " + f;
  }
  return r;
}

std::vector<std::string> criterion_names() {
  return {"dp_optimality", "incremental_equivalence", "fisher_oracle",   "gradcheck",      "fidelity",
          "end_to_end",    "finetune_recovery",       "complexity",      "reproducibility"};
}

std::vector<CriterionResult> run_acceptance(const VerifyOptions& opt) {
  using Check = CriterionResult (*)(const VerifyOptions&);
  const std::pair<const char*, Check> checks[] = {
      {"dp_optimality", check_dp_optimality},
      {"incremental_equivalence", check_incremental_equivalence},
      {"fisher_oracle", check_fisher_oracle},
      {"gradcheck", check_gradcheck},
      {"fidelity", check_fidelity},
      {"end_to_end", check_end_to_end},
      {"finetune_recovery", check_finetune_recovery},
      {"complexity", check_complexity},
      {"reproducibility", check_reproducibility},
  };
  const double limits[] = {10.0, 30.0, 0.0, 60.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  for (const auto& name : opt.only)
    if (std::none_of(std::begin(checks), std::end(checks), [&](const auto& c) { return name == c.first; }))
      throw Error("unknown criterion '" + name + "'");

  std::vector<CriterionResult> results;
  for (std::size_t i = 0; i < std::size(checks); ++i) {
    const auto& [name, fn] = checks[i];
    if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), name) == opt.only.end()) continue;
    auto r = timed(name, [&] { return fn(opt); });
    if (limits[i] > 0.0 && r.seconds >= limits[i]) {
      r.passed = false;
      r.detail += "; runtime " + fmt("%.2f", r.seconds) + " s exceeds " + fmt("%.0f", limits[i]) + " s";
    }
    results.push_back(std::move(r));
  }
  return results;
}

std::string format_result(const CriterionResult& r) {
  return std::string(r.passed ? "PASS " : "FAIL ") + r.name + ": " + r.detail + " (" + fmt("%.2f", r.seconds) +
         " s)";
}

}  // namespace dmprune
