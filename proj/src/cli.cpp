#include "dmprune/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dmprune/dmb.hpp"
#include "dmprune/pipeline.hpp"
#include "dmprune/refnet.hpp"
#include "dmprune/verify.hpp"

namespace dmprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 42;
  std::size_t threads = 0;
  bool no_timestamps = false;
};

struct CurveFlags {
  std::string model;
  std::string grads;
  std::size_t k = 20;
  std::string delta_mode = "squared";
  std::string kappa = "auto";
  std::string fisher = "auto";
  std::string cache_dir;
  bool no_cache = false;
};

struct BudgetFlags {
  std::optional<double> flops_ratio;
  std::optional<std::size_t> prune_count;
  double quantum = 0.0;
};

void add_curve_flags(CLI::App* sub, CurveFlags& f) {
  sub->add_option("--model", f.model, "Model DMB")->required();
  sub->add_option("--grads", f.grads, "Gradient DMB (default: grads.dmb next to the model)");
  sub->add_option("--k", f.k, "Grid points per layer")->check(CLI::PositiveNumber);
  sub->add_option("--delta-mode", f.delta_mode, "squared|abs")->check(CLI::IsMember({"squared", "abs"}));
  sub->add_option("--kappa", f.kappa, "Fisher dampening: auto or a nonnegative number")
      ->check(CLI::Validator(
          [](std::string& s) -> std::string {
            if (s == "auto") return {};
            try {
              std::size_t pos = 0;
              const double v = std::stod(s, &pos);
              if (pos == s.size() && v >= 0.0 && std::isfinite(v)) return {};
            } catch (const std::exception&) {
            }
            return "expected 'auto' or a nonnegative number, got '" + s + "'";
          },
          "auto|VALUE"));
  sub->add_option("--fisher", f.fisher, "dense|factor|auto")->check(CLI::IsMember({"dense", "factor", "auto"}));
  sub->add_option("--cache-dir", f.cache_dir, "Curve cache directory (default: $DMPRUNE_CACHE_DIR, then .dmprune-cache next to the model)");
  sub->add_flag("--no-cache", f.no_cache, "Do not read or write the curve cache");
}

void add_budget_flags(CLI::App* sub, BudgetFlags& b) {
  auto* r = sub->add_option("--flops-ratio", b.flops_ratio, "Keep at most this fraction of prunable FLOPs (default 0.5)")
                ->check(CLI::Range(0.0, 1.0));
  auto* t = sub->add_option("--prune-count", b.prune_count, "Prune at least this many weights");
  r->excludes(t);
  sub->add_option("--quantum", b.quantum, "FLOPs per budget unit (default: automatic)")->check(CLI::NonNegativeNumber);
}

PipelineConfig make_config(const Globals& g, const CurveFlags& f) {
  PipelineConfig cfg;
  cfg.k_points = f.k;
  cfg.delta_mode = delta_mode_from_string(f.delta_mode);
  if (f.kappa != "auto") cfg.kappa = std::stod(f.kappa);
  if (f.fisher != "auto") cfg.fisher_mode = fisher_mode_from_string(f.fisher);
  cfg.threads = g.threads;
  cfg.timestamps = !g.no_timestamps;
  cfg.seed = g.seed;
  if (!f.no_cache) {
    if (!f.cache_dir.empty()) {
      cfg.cache_dir = fs::path(f.cache_dir);
    } else if (const char* env = std::getenv("DMPRUNE_CACHE_DIR"); env && *env) {
      cfg.cache_dir = fs::path(env);
    } else {
      cfg.cache_dir = fs::path(f.model).parent_path() / ".dmprune-cache";
    }
  }
  return cfg;
}

void apply_budget(PipelineConfig& cfg, const BudgetFlags& b) {
  cfg.quantum = b.quantum;
  if (b.prune_count) {
    cfg.prune_count = b.prune_count;
  } else {
    cfg.flops_ratio = b.flops_ratio.value_or(0.5);
  }
}

std::string grads_path(const CurveFlags& f) {
  return f.grads.empty() ? (fs::path(f.model).parent_path() / "grads.dmb").string() : f.grads;
}

GradientBundle load_grads_or_fail(const std::string& path) {
  if (!fs::exists(path)) throw Error("missing gradient bundle: " + path + " (run 'grad' first)");
  return load_gradients(path);
}

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f << text;
  if (!f) throw Error("cannot write " + path);
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || item.empty()) throw CLI::ValidationError("--ratios", "not a number: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError("--ratios", "at least one ratio is required");
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Post-training pruning with per-layer distortion curves and DP sparsity allocation", "dmprune"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random draw");
  app.add_option("--threads", g.threads, "Worker threads (0: all available)");
  app.add_flag("--no-timestamps", g.no_timestamps, "Write zero stage timings so outputs are byte-stable");

  // demo-export
  std::string demo_out;
  std::size_t demo_samples = 64;
  auto* demo = app.add_subcommand("demo-export", "Write a seeded reference network and calibration set");
  demo->add_option("--out", demo_out, "Output directory (model.dmb, calib.dmb)")->required();
  demo->add_option("--calib-samples", demo_samples, "Calibration inputs")->check(CLI::PositiveNumber);

  // grad
  std::string grad_model, grad_calib, grad_out;
  double lambda_b = 1.0, lambda_c = 1.0;
  auto* grad = app.add_subcommand("grad", "Per-sample gradients of the scalarized output");
  grad->add_option("--model", grad_model, "Model DMB")->required();
  grad->add_option("--calib", grad_calib, "Calibration DMB")->required();
  grad->add_option("--out", grad_out, "Gradient DMB (default: grads.dmb next to the model)");
  grad->add_option("--lambda-b", lambda_b, "Box head weight")->check(CLI::NonNegativeNumber);
  grad->add_option("--lambda-c", lambda_c, "Confidence head weight")->check(CLI::NonNegativeNumber);

  // curves
  CurveFlags curve_flags;
  std::string curves_out;
  auto* curves = app.add_subcommand("curves", "Per-layer distortion curves as CSV");
  add_curve_flags(curves, curve_flags);
  curves->add_option("--out", curves_out, "CSV path (default: stdout)");

  // allocate
  CurveFlags alloc_flags;
  BudgetFlags alloc_budget;
  std::string alloc_out;
  auto* allocate = app.add_subcommand("allocate", "Layerwise sparsity allocation as JSON");
  add_curve_flags(allocate, alloc_flags);
  add_budget_flags(allocate, alloc_budget);
  allocate->add_option("--out", alloc_out, "JSON path (default: stdout)");

  // prune
  CurveFlags prune_flags;
  BudgetFlags prune_budget;
  std::string prune_out, prune_report, prune_calib;
  std::size_t ft_epochs = 0, ft_samples = 256;
  double ft_step = 0.05;
  auto* prune = app.add_subcommand("prune", "Write the pruned model and a report");
  add_curve_flags(prune, prune_flags);
  add_budget_flags(prune, prune_budget);
  prune->add_option("--out", prune_out, "Pruned model DMB")->required();
  prune->add_option("--report", prune_report, "Report JSON (default: <out>.report.json)");
  prune->add_option("--calib", prune_calib, "Calibration DMB; enables measured distortion and finetuning");
  prune->add_option("--finetune-epochs", ft_epochs, "Self-distillation epochs after pruning");
  prune->add_option("--finetune-step", ft_step, "Initial finetune step size")->check(CLI::PositiveNumber);
  prune->add_option("--finetune-samples", ft_samples, "Synthetic training inputs for finetuning")
      ->check(CLI::PositiveNumber);

  // eval
  std::string eval_dense, eval_pruned, eval_calib, eval_out;
  double eval_lb = 1.0, eval_lc = 1.0;
  auto* eval = app.add_subcommand("eval", "Measured output distortion of a pruned reference network");
  eval->add_option("--dense", eval_dense, "Dense model DMB")->required();
  eval->add_option("--pruned", eval_pruned, "Pruned model DMB")->required();
  eval->add_option("--calib", eval_calib, "Calibration DMB")->required();
  eval->add_option("--lambda-b", eval_lb, "Box head weight")->check(CLI::NonNegativeNumber);
  eval->add_option("--lambda-c", eval_lc, "Confidence head weight")->check(CLI::NonNegativeNumber);
  eval->add_option("--out", eval_out, "JSON path (default: stdout)");

  // sweep
  CurveFlags sweep_flags;
  std::string sweep_ratios = "0.9,0.7,0.5,0.3", sweep_out, sweep_calib;
  auto* sweep = app.add_subcommand("sweep", "Allocation across FLOPs ratios as CSV");
  add_curve_flags(sweep, sweep_flags);
  sweep->add_option("--ratios", sweep_ratios, "Comma-separated FLOPs ratios");
  sweep->add_option("--calib", sweep_calib, "Calibration DMB; adds measured distortion");
  sweep->add_option("--out", sweep_out, "CSV path (default: stdout)");

  // verify
  std::string verify_out = (fs::temp_directory_path() / "dmprune-verify").string();
  std::vector<std::string> verify_only;
  auto* verify = app.add_subcommand("verify", "Run the self-verification suite");
  verify->add_option("--out", verify_out, "Artifact directory");
  verify->add_option("--only", verify_only, "Run only these criteria")->check(CLI::IsMember(criterion_names()));

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (*demo) {
      RefNetSpec spec;
      spec.seed = g.seed;
      const auto params = init_params(spec);
      const fs::path dir(demo_out);
      fs::create_directories(dir);
      save_bundle(to_bundle(spec, params), dir / "model.dmb");
      save_bundle(synth_calibration(spec, demo_samples, g.seed), dir / "calib.dmb");
      out << (dir / "model.dmb").string() << "\n" << (dir / "calib.dmb").string() << "\n";
    } else if (*grad) {
      const auto model = load_model(grad_model);
      if (!is_refnet_bundle(model))
        throw Error("gradients can only be computed for reference network bundles; use an exporter for other models");
      const auto calib = load_calibration(grad_calib);
      const auto spec = spec_from_bundle(model);
      const LambdaWeights lambda{lambda_b, lambda_c};
      lambda.validate();
      const auto bundle = build_gradient_bundle(spec, params_from_bundle(model), calib, Scalarizer(spec, lambda));
      const fs::path path = grad_out.empty() ? fs::path(grad_model).parent_path() / "grads.dmb" : fs::path(grad_out);
      save_bundle(bundle, path);
      out << path.string() << "\n";
    } else if (*curves) {
      const auto cfg = make_config(g, curve_flags);
      const auto model = load_model(curve_flags.model);
      const auto grads = load_grads_or_fail(grads_path(curve_flags));
      write_text(curves_out, curves_csv(compute_curves(model, grads, cfg)), out);
    } else if (*allocate) {
      auto cfg = make_config(g, alloc_flags);
      apply_budget(cfg, alloc_budget);
      const auto model = load_model(alloc_flags.model);
      const auto grads = load_grads_or_fail(grads_path(alloc_flags));
      const auto layer_curves = compute_curves(model, grads, cfg);
      std::vector<DistortionCurve> bare;
      for (const auto& lc : layer_curves) bare.push_back(lc.curve);
      auto result = dp_allocate(bare, cfg.budget(bare, model));
      for (std::size_t i = 0; i < layer_curves.size(); ++i) result.layers[i].name = layer_curves[i].name;
      write_text(alloc_out, dump(to_json(result)), out);
    } else if (*prune) {
      auto cfg = make_config(g, prune_flags);
      apply_budget(cfg, prune_budget);
      cfg.finetune_epochs = ft_epochs;
      cfg.finetune_step = ft_step;
      cfg.finetune_samples = ft_samples;
      const auto model = load_model(prune_flags.model);
      const auto grads = load_grads_or_fail(grads_path(prune_flags));
      cfg.lambda = {grads.lambda_used.first, grads.lambda_used.second};
      std::optional<CalibrationSet> calib;
      if (!prune_calib.empty()) calib = load_calibration(prune_calib);
      const auto outcome = run_prune(model, grads, cfg, calib ? &*calib : nullptr);
      save_bundle(outcome.pruned, prune_out);
      write_text(prune_report.empty() ? prune_out + ".report.json" : prune_report, dump(outcome.report), out);
    } else if (*eval) {
      const auto dense = load_model(eval_dense);
      const auto pruned = load_model(eval_pruned);
      if (!is_refnet_bundle(dense) || !is_refnet_bundle(pruned))
        throw Error("eval needs reference network bundles");
      const auto spec = spec_from_bundle(dense);
      if (!(spec_from_bundle(pruned) == spec)) throw Error("dense and pruned bundles describe different networks");
      const auto calib = load_calibration(eval_calib);
      const LambdaWeights lambda{eval_lb, eval_lc};
      lambda.validate();
      const double td =
          true_distortion(spec, params_from_bundle(dense), params_from_bundle(pruned), calib, Scalarizer(spec, lambda));
      json j;
      j["true_distortion"] = td;
      j["flops_ratio"] = flops_of(pruned, pruned.masks) / flops_of(dense);
      write_text(eval_out, dump(j), out);
    } else if (*sweep) {
      const auto cfg = make_config(g, sweep_flags);
      const auto ratios = parse_ratios(sweep_ratios);
      const auto model = load_model(sweep_flags.model);
      const auto grads = load_grads_or_fail(grads_path(sweep_flags));
      PipelineConfig c = cfg;
      c.lambda = {grads.lambda_used.first, grads.lambda_used.second};
      std::optional<CalibrationSet> calib;
      if (!sweep_calib.empty()) calib = load_calibration(sweep_calib);
      write_text(sweep_out, sweep_csv(pareto_sweep(model, grads, ratios, c, calib ? &*calib : nullptr)), out);
    } else if (*verify) {
      VerifyOptions opt;
      opt.out_dir = verify_out;
      opt.seed = g.seed;
      opt.threads = g.threads;
      opt.only = verify_only;
      bool all = true;
      for (const auto& r : run_acceptance(opt)) {
        out << format_result(r) << "\n" << std::flush;
        all = all && r.passed;
      }
      return all ? kExitOk : kExitVerify;
    }
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace dmprune
