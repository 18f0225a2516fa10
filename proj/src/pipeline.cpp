#include "dmprune/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "dmprune/hessian.hpp"
#include "dmprune/scoring.hpp"

namespace dmprune {

using nlohmann::json;

namespace {

constexpr int kCacheVersion = 1;

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void record(std::vector<StageTiming>* timings, const char* name, const Stopwatch& sw, bool timestamps) {
  if (timings) timings->push_back({name, timestamps ? sw.ms() : 0.0});
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::uint64_t hash_bytes(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t hash_u64(std::uint64_t v, std::uint64_t h) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  return hash_bytes(b, 8, h);
}

json curve_to_json(const LayerCurve& lc) {
  const auto& c = lc.curve;
  json j;
  j["version"] = kCacheVersion;
  j["layer_id"] = c.layer_id;
  j["dim"] = c.dim;
  j["counts"] = c.counts;
  j["q"] = c.q;
  j["delta"] = c.delta;
  j["method"] = to_string(c.method);
  j["delta_mode"] = to_string(c.delta_mode);
  j["kappa"] = lc.kappa;
  j["fisher"] = to_string(lc.fisher_mode);
  return j;
}

std::optional<LayerCurve> read_cached(const std::filesystem::path& file, const LayerCurve& base) {
  std::ifstream in(file);
  if (!in) return std::nullopt;
  try {
    const json j = json::parse(in);
    if (j.at("version").get<int>() != kCacheVersion) return std::nullopt;
    LayerCurve lc = base;
    auto& c = lc.curve;
    c.layer_id = j.at("layer_id").get<int>();
    c.dim = j.at("dim").get<std::size_t>();
    c.counts = j.at("counts").get<std::vector<std::size_t>>();
    c.q = j.at("q").get<std::vector<double>>();
    c.delta = j.at("delta").get<std::vector<double>>();
    c.method = j.at("method").get<std::string>() == "direct" ? CurveMethod::direct : CurveMethod::incremental;
    c.delta_mode = delta_mode_from_string(j.at("delta_mode").get<std::string>());
    c.alphas.clear();
    for (auto k : c.counts) c.alphas.push_back(static_cast<double>(k) / static_cast<double>(c.dim));
    lc.kappa = j.at("kappa").get<double>();
    lc.fisher_mode = fisher_mode_from_string(j.at("fisher").get<std::string>());
    c.validate();
    if (c.layer_id != base.layer_id || c.dim != base.order.size()) return std::nullopt;
    return lc;
  } catch (const std::exception&) {
    return std::nullopt;  // unreadable cache entries are recomputed
  }
}

void write_cached(const std::filesystem::path& file, const LayerCurve& lc) {
  std::error_code ec;
  std::filesystem::create_directories(file.parent_path(), ec);
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) return;
    out << curve_to_json(lc).dump();
  }
  std::filesystem::rename(tmp, file, ec);
}

std::uint64_t curve_key(const LayerRecord& layer, const LayerGradient& grad, const PipelineConfig& cfg) {
  std::uint64_t h = content_hash(layer.weight.data);
  h = content_hash(grad.avg_grad.data, h);
  if (grad.per_sample) h = content_hash(grad.per_sample->data, h);
  h = hash_u64(static_cast<std::uint64_t>(kCacheVersion), h);
  h = hash_u64(static_cast<std::uint64_t>(layer.layer_id), h);
  h = hash_u64(cfg.k_points, h);
  h = hash_u64(cfg.delta_mode == DeltaMode::squared ? 1 : 2, h);
  h = hash_u64(cfg.kappa ? std::bit_cast<std::uint64_t>(*cfg.kappa) : ~0ULL, h);
  h = hash_u64(cfg.fisher_mode ? (*cfg.fisher_mode == FisherMode::dense ? 1 : 2) : 0, h);
  return h;
}

LayerCurve compute_layer_curve(const LayerRecord& layer, const LayerGradient& grad, const PipelineConfig& cfg) {
  if (grad.avg_grad.shape != layer.weight.shape)
    throw Error("gradient shape does not match weight shape for layer '" + layer.name + "'");
  LayerCurve lc;
  lc.layer_id = layer.layer_id;
  lc.name = layer.name;
  lc.flops_per_weight = layer.flops_per_weight;
  lc.order = layer_order(layer, grad);

  std::optional<std::filesystem::path> cache_file;
  if (cfg.cache_dir) {
    cache_file = *cfg.cache_dir / ("curve-" + hex64(curve_key(layer, grad, cfg)) + ".json");
    if (auto cached = read_cached(*cache_file, lc)) return std::move(*cached);
  }

  const std::size_t d = layer.size();
  std::span<const double> rows = grad.per_sample ? std::span<const double>(grad.per_sample->data)
                                                 : std::span<const double>(grad.avg_grad.data);
  const std::size_t n = grad.per_sample ? grad.n_rows() : 1;
  lc.kappa = cfg.kappa ? *cfg.kappa : default_kappa(rows, n, d);
  lc.fisher_mode = cfg.fisher_mode ? *cfg.fisher_mode : (d <= kDenseFisherCap ? FisherMode::dense : FisherMode::factor);
  const auto fisher = FisherMatrix::build(rows, n, d, lc.kappa, lc.fisher_mode);

  const auto counts = count_grid(d, cfg.k_points);
  LayerCurveInput in{layer.layer_id, &layer.weight, &grad.avg_grad, &fisher};
  lc.curve = delta_curve_incremental(in, lc.order, counts, cfg.delta_mode);
  if (cache_file) write_cached(*cache_file, lc);
  return lc;
}

std::vector<double> curve_costs(std::span<const DistortionCurve> curves, const ModelBundle& model) {
  std::vector<double> costs;
  for (const auto& c : curves) costs.push_back(model.layer(c.layer_id).flops_per_weight);
  return costs;
}

std::vector<DistortionCurve> bare_curves(std::span<const LayerCurve> curves) {
  std::vector<DistortionCurve> out;
  for (const auto& lc : curves) out.push_back(lc.curve);
  return out;
}

ModelBundle prune_with_counts(const ModelBundle& model, std::span<const LayerCurve> curves,
                              std::span<const std::size_t> counts, std::vector<PruneMask>* masks) {
  ModelBundle out = model;
  out.masks.clear();
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& lc = curves[i];
    auto& layer = out.layers[static_cast<std::size_t>(lc.layer_id)];
    PruneMask m = mask_at_count(lc.order, counts[i], layer.weight.shape);
    m.layer_id = lc.layer_id;
    for (std::size_t j = 0; j < layer.size(); ++j)
      if (m.bits.data[j] == 0.0) layer.weight.data[j] = 0.0;
    out.masks.push_back(PruneMask::from_bits(lc.layer_id, m.bits));
    if (masks) masks->push_back(std::move(m));
  }
  return out;
}

}  // namespace

std::uint64_t content_hash(std::span<const double> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (double v : values) h = hash_u64(std::bit_cast<std::uint64_t>(v), h);
  return h;
}

Budget PipelineConfig::budget(std::span<const DistortionCurve> curves, const ModelBundle& model) const {
  if (flops_ratio) return FlopsBudget{*flops_ratio, curve_costs(curves, model), quantum};
  if (prune_count) return CountBudget{*prune_count, curve_costs(curves, model)};
  throw Error("no pruning budget configured (flops ratio or prune count)");
}

json PipelineConfig::to_json() const {
  json j;
  j["k"] = k_points;
  if (flops_ratio) j["flops_ratio"] = *flops_ratio;
  if (prune_count) j["prune_count"] = *prune_count;
  j["delta_mode"] = dmprune::to_string(delta_mode);
  j["kappa"] = kappa ? json(*kappa) : json("auto");
  j["fisher"] = fisher_mode ? json(dmprune::to_string(*fisher_mode)) : json("auto");
  j["quantum"] = quantum > 0.0 ? json(quantum) : json("auto");
  j["lambda"] = {lambda.box, lambda.conf};
  j["finetune_epochs"] = finetune_epochs;
  j["seed"] = seed;
  return j;
}

std::vector<std::size_t> layer_order(const LayerRecord& layer, const LayerGradient& grad) {
  return prune_order(taylor_scores(layer.weight, grad.avg_grad).data);
}

std::vector<LayerCurve> compute_curves(const ModelBundle& model, const GradientBundle& grads,
                                       const PipelineConfig& config, std::vector<StageTiming>* timings) {
  model.validate();
  grads.validate();
  if (config.k_points < 1) throw Error("K must be >= 1");
  const auto ids = model.prunable_ids();
  std::vector<const LayerGradient*> lg;
  for (int id : ids) {
    const auto* g = grads.find(id);
    if (!g) throw Error("missing gradients for prunable layer '" + model.layer(id).name + "'");
    lg.push_back(g);
  }
  Stopwatch sw;
  std::vector<LayerCurve> curves(ids.size());
  parallel_for(ids.size(), config.threads, [&](std::size_t i) {
    curves[i] = compute_layer_curve(model.layer(ids[i]), *lg[i], config);
  });
  record(timings, "curves", sw, config.timestamps);
  return curves;
}

ModelBundle apply_allocation(const ModelBundle& model, std::span<const LayerCurve> curves,
                             const AllocationResult& allocation, std::vector<PruneMask>* masks) {
  if (allocation.layers.size() != curves.size()) throw Error("allocation does not match the curves");
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    if (allocation.layers[i].layer_id != curves[i].layer_id) throw Error("allocation does not match the curves");
    counts.push_back(allocation.layers[i].k);
  }
  return prune_with_counts(model, curves, counts, masks);
}

ModelBundle uniform_prune(const ModelBundle& model, std::span<const LayerCurve> curves, double flops_ratio) {
  std::vector<std::size_t> counts;
  for (const auto& lc : curves) counts.push_back(count_for_ratio(1.0 - flops_ratio, lc.order.size()));
  return prune_with_counts(model, curves, counts, nullptr);
}

namespace {

struct RefnetContext {
  RefNetSpec spec;
  RefNetParams dense;
  Scalarizer scalarizer;
};

std::optional<RefnetContext> refnet_context(const ModelBundle& model, const PipelineConfig& cfg,
                                            const CalibrationSet* calib) {
  if (!calib || !is_refnet_bundle(model)) return std::nullopt;
  const auto spec = spec_from_bundle(model);
  return RefnetContext{spec, params_from_bundle(model), Scalarizer(spec, cfg.lambda)};
}

double measured(const RefnetContext& ctx, const ModelBundle& pruned, const CalibrationSet& calib) {
  return true_distortion(ctx.spec, ctx.dense, params_from_bundle(pruned), calib, ctx.scalarizer);
}

}  // namespace

PruneOutcome run_prune(const ModelBundle& model, const GradientBundle& grads, const PipelineConfig& config,
                       const CalibrationSet* calib) {
  std::vector<StageTiming> timings;
  PruneOutcome out;

  out.curves = compute_curves(model, grads, config, &timings);
  const auto curves = bare_curves(out.curves);

  Stopwatch sw_dp;
  const Budget budget = config.budget(curves, model);
  out.allocation = dp_allocate(curves, budget);
  for (std::size_t i = 0; i < out.curves.size(); ++i) out.allocation.layers[i].name = out.curves[i].name;
  record(&timings, "allocate", sw_dp, config.timestamps);

  Stopwatch sw_apply;
  out.pruned = apply_allocation(model, out.curves, out.allocation, &out.masks);
  record(&timings, "apply_masks", sw_apply, config.timestamps);

  json diagnostics = json::object();
  const auto uniform = uniform_allocate(curves, budget);
  diagnostics["uniform_grid_baseline"] = {{"total_delta", uniform.total_delta},
                                          {"achieved_flops_ratio", uniform.achieved_flops_ratio}};

  if (out.curves.size() >= 2) {
    const auto* ga = grads.find(out.curves[0].layer_id);
    const auto* gb = grads.find(out.curves[1].layer_id);
    CrossTermInput a{ga->layer_id, &model.layer(ga->layer_id).weight, &ga->avg_grad,
                     ga->per_sample ? &*ga->per_sample : nullptr};
    CrossTermInput b{gb->layer_id, &model.layer(gb->layer_id).weight, &gb->avg_grad,
                     gb->per_sample ? &*gb->per_sample : nullptr};
    diagnostics["cross_term"] = to_json(cross_term_diagnostic(a, b, 0.1, 100, 3));
  }

  json notes = json::array();
  if (const auto ctx = refnet_context(model, config, calib)) {
    Stopwatch sw_eval;
    json eval;
    eval["true_distortion"] = measured(*ctx, out.pruned, *calib);
    if (config.flops_ratio) {
      const auto base = uniform_prune(model, out.curves, *config.flops_ratio);
      eval["uniform_true_distortion"] = measured(*ctx, base, *calib);
      eval["uniform_flops_ratio"] = flops_of(base, base.masks) / flops_of(model);
    }
    record(&timings, "evaluate", sw_eval, config.timestamps);

    if (config.finetune_epochs > 0) {
      Stopwatch sw_ft;
      const auto train = synth_calibration(ctx->spec, config.finetune_samples, calib->seed + 1);
      std::vector<Tensor> masks(ctx->spec.layer_count());
      for (const auto& m : out.pruned.masks) masks[static_cast<std::size_t>(m.layer_id)] = m.bits;
      FinetuneOptions opts{config.finetune_epochs, config.finetune_step, config.finetune_batch, config.seed};
      const auto ft = finetune(ctx->spec, params_from_bundle(out.pruned), ctx->dense, masks, train, opts);
      const std::size_t layers = ctx->spec.layer_count();
      for (std::size_t i = 0; i < layers; ++i) {
        out.pruned.layers[i].weight = ft.params.weights[i];
        out.pruned.layers[layers + i].weight = ft.params.biases[i];
      }
      eval["finetuned_true_distortion"] = measured(*ctx, out.pruned, *calib);
      eval["finetune"] = {{"epochs_run", ft.epochs_run},
                          {"early_stopped", ft.early_stopped},
                          {"initial_loss", ft.loss_history.front()},
                          {"final_loss", ft.loss_history.back()}};
      record(&timings, "finetune", sw_ft, config.timestamps);
    }
    diagnostics["evaluation"] = std::move(eval);
  } else if (config.finetune_epochs > 0) {
    notes.push_back("finetuning skipped: the model is not an executable refnet bundle or no calibration set was given");
  }

  const double dense_flops = flops_of(model);
  const double pruned_flops = flops_of(out.pruned, out.pruned.masks);
  json report;
  report["config"] = config.to_json();
  report["stages"] = json::array();
  for (const auto& t : timings) report["stages"].push_back({{"name", t.name}, {"wall_ms", t.wall_ms}});
  report["allocation"] = to_json(out.allocation);
  report["flops"] = {{"dense", dense_flops}, {"pruned", pruned_flops}, {"ratio", pruned_flops / dense_flops}};
  report["diagnostics"] = std::move(diagnostics);
  if (!notes.empty()) report["notes"] = std::move(notes);
  out.report = std::move(report);
  return out;
}

std::vector<SweepRow> pareto_sweep(const ModelBundle& model, const GradientBundle& grads,
                                   std::span<const double> ratios, const PipelineConfig& config,
                                   const CalibrationSet* calib) {
  for (double r : ratios)
    if (!(r > 0.0 && r <= 1.0)) throw Error("sweep ratios must lie in (0, 1]");
  const auto layer_curves = compute_curves(model, grads, config);
  const auto curves = bare_curves(layer_curves);
  const auto ctx = refnet_context(model, config, calib);
  std::vector<SweepRow> rows;
  for (double r : ratios) {
    PipelineConfig c = config;
    c.flops_ratio = r;
    const auto alloc = dp_allocate(curves, c.budget(curves, model));
    SweepRow row;
    row.ratio = r;
    row.achieved_ratio = alloc.achieved_flops_ratio;
    row.total_delta = alloc.total_delta;
    if (ctx) row.true_distortion = measured(*ctx, apply_allocation(model, layer_curves, alloc), *calib);
    rows.push_back(row);
  }
  return rows;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << "R,achieved_ratio,total_delta,true_distortion\n";
  for (const auto& r : rows) {
    os << format_real(r.ratio) << ',' << format_real(r.achieved_ratio) << ',' << format_real(r.total_delta) << ',';
    if (r.true_distortion) os << format_real(*r.true_distortion);
    os << '\n';
  }
  return os.str();
}

std::string curves_csv(std::span<const LayerCurve> curves) {
  std::ostringstream os;
  os << "layer_id,k,alpha,q,delta\n";
  for (const auto& lc : curves) {
    const auto& c = lc.curve;
    for (std::size_t j = 0; j < c.points(); ++j)
      os << c.layer_id << ',' << c.counts[j] << ',' << format_real(c.alphas[j]) << ',' << format_real(c.q[j]) << ','
         << format_real(c.delta[j]) << '\n';
  }
  return os.str();
}

json to_json(const AllocationResult& a) {
  json j;
  j["budget_mode"] = to_string(a.budget_mode);
  j["budget_spec"] = a.budget_spec;
  if (a.quantum) j["quantum"] = *a.quantum;
  j["layers"] = json::array();
  for (const auto& l : a.layers)
    j["layers"].push_back(
        {{"layer_id", l.layer_id}, {"name", l.name}, {"D", l.dim}, {"k", l.k}, {"alpha", l.alpha}, {"delta", l.delta}});
  j["total_delta"] = a.total_delta;
  j["achieved_flops_ratio"] = a.achieved_flops_ratio;
  j["required_units"] = a.required_units;
  j["traceback"] = json::array();
  for (const auto& t : a.traceback)
    j["traceback"].push_back({{"layer_id", t.layer_id}, {"state", t.state}, {"grid_index", t.grid_index}, {"units", t.units}});
  return j;
}

json to_json(const CrossTermReport& r) {
  return {{"layer_i", r.layer_i}, {"layer_j", r.layer_j}, {"alpha", r.alpha},     {"trials", r.trials},
          {"seed", r.seed},       {"mean_cross", r.mean_cross}, {"mean_self_i", r.mean_self_i},
          {"mean_self_j", r.mean_self_j}, {"ratio", r.ratio}};
}

}  // namespace dmprune
