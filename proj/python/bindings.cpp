#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "dmprune/allocator.hpp"
#include "dmprune/cli.hpp"
#include "dmprune/dmb.hpp"
#include "dmprune/hessian.hpp"
#include "dmprune/pipeline.hpp"
#include "dmprune/scoring.hpp"

namespace py = pybind11;
using namespace dmprune;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

py::array_t<double> to_array(const std::vector<double>& v) { return to_array(Tensor({static_cast<std::int64_t>(v.size())}, v)); }

py::array_t<std::int64_t> to_index_array(const std::vector<std::size_t>& v) {
  py::array_t<std::int64_t> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::vector<double> flat(const Array& a) { return {a.data(), a.data() + a.size()}; }

py::dict meta_dict(const std::map<std::string, std::string>& m) {
  py::dict d;
  for (const auto& [k, v] : m) d[py::str(k)] = v;
  return d;
}

std::map<std::string, std::string> meta_map(const py::dict& d) {
  std::map<std::string, std::string> m;
  for (auto [k, v] : d) m[py::str(k)] = py::str(v);
  return m;
}

py::dict model_to_dict(const ModelBundle& b) {
  py::list layers;
  for (const auto& l : b.layers) {
    py::dict d;
    d["layer_id"] = l.layer_id;
    d["name"] = l.name;
    d["kind"] = to_string(l.kind);
    d["weight"] = to_array(l.weight);
    d["flops_per_weight"] = l.flops_per_weight;
    d["prunable"] = l.prunable;
    layers.append(d);
  }
  py::list masks;
  for (const auto& m : b.masks) {
    py::dict d;
    d["layer_id"] = m.layer_id;
    d["bits"] = to_array(m.bits);
    d["order"] = to_index_array(m.order);
    masks.append(d);
  }
  py::dict out;
  out["kind"] = "model";
  out["layers"] = layers;
  out["meta"] = meta_dict(b.meta);
  out["masks"] = masks;
  return out;
}

ModelBundle model_from_dict(const py::dict& d) {
  ModelBundle b;
  for (auto item : d["layers"].cast<py::list>()) {
    const auto l = item.cast<py::dict>();
    LayerRecord r;
    r.layer_id = l["layer_id"].cast<int>();
    r.name = l["name"].cast<std::string>();
    r.kind = layer_kind_from_string(l["kind"].cast<std::string>());
    r.weight = to_tensor(l["weight"].cast<Array>());
    r.flops_per_weight = l["flops_per_weight"].cast<double>();
    r.prunable = l.contains("prunable") ? l["prunable"].cast<bool>() : r.kind != LayerKind::opaque;
    b.layers.push_back(std::move(r));
  }
  if (d.contains("meta")) b.meta = meta_map(d["meta"].cast<py::dict>());
  if (d.contains("masks"))
    for (auto item : d["masks"].cast<py::list>()) {
      const auto m = item.cast<py::dict>();
      b.masks.push_back(PruneMask::from_bits(m["layer_id"].cast<int>(), to_tensor(m["bits"].cast<Array>())));
    }
  b.validate();
  return b;
}

py::dict grads_to_dict(const GradientBundle& g) {
  py::list layers;
  for (const auto& l : g.layers) {
    py::dict d;
    d["layer_id"] = l.layer_id;
    d["name"] = l.name;
    d["avg_grad"] = to_array(l.avg_grad);
    d["per_sample"] = l.per_sample ? py::object(to_array(*l.per_sample)) : py::none();
    layers.append(d);
  }
  py::dict out;
  out["kind"] = "gradients";
  out["layers"] = layers;
  out["lambda_used"] = py::make_tuple(g.lambda_used.first, g.lambda_used.second);
  out["n_samples"] = g.n_samples;
  out["meta"] = meta_dict(g.meta);
  return out;
}

GradientBundle grads_from_dict(const py::dict& d) {
  GradientBundle g;
  for (auto item : d["layers"].cast<py::list>()) {
    const auto l = item.cast<py::dict>();
    LayerGradient lg;
    lg.layer_id = l["layer_id"].cast<int>();
    lg.name = l.contains("name") ? l["name"].cast<std::string>() : "";
    lg.avg_grad = to_tensor(l["avg_grad"].cast<Array>());
    if (l.contains("per_sample") && !l["per_sample"].is_none()) lg.per_sample = to_tensor(l["per_sample"].cast<Array>());
    g.layers.push_back(std::move(lg));
  }
  if (d.contains("lambda_used")) g.lambda_used = d["lambda_used"].cast<std::pair<double, double>>();
  if (d.contains("n_samples")) g.n_samples = d["n_samples"].cast<int>();
  if (d.contains("meta")) g.meta = meta_map(d["meta"].cast<py::dict>());
  g.validate();
  return g;
}

py::dict calib_to_dict(const CalibrationSet& c) {
  py::dict out;
  out["kind"] = "calibration";
  out["inputs"] = to_array(c.inputs);
  out["seed"] = c.seed;
  out["meta"] = meta_dict(c.meta);
  return out;
}

CalibrationSet calib_from_dict(const py::dict& d) {
  CalibrationSet c;
  c.inputs = to_tensor(d["inputs"].cast<Array>());
  if (d.contains("seed")) c.seed = d["seed"].cast<std::uint64_t>();
  if (d.contains("meta")) c.meta = meta_map(d["meta"].cast<py::dict>());
  c.validate();
  return c;
}

FisherMode pick_mode(const std::string& mode, std::size_t dim) {
  if (mode == "auto") return dim <= kDenseFisherCap ? FisherMode::dense : FisherMode::factor;
  return fisher_mode_from_string(mode);
}

FisherMatrix make_fisher(const Array& g, std::optional<double> kappa, const std::string& mode) {
  if (g.ndim() != 2) throw Error("per-sample gradients must be a 2-D array (N, D)");
  const auto n = static_cast<std::size_t>(g.shape(0)), d = static_cast<std::size_t>(g.shape(1));
  const auto rows = flat(g);
  return FisherMatrix::build(rows, n, d, kappa.value_or(default_kappa(rows, n, d)), pick_mode(mode, d));
}

py::dict curve_to_dict(const DistortionCurve& c) {
  py::dict d;
  d["layer_id"] = c.layer_id;
  d["dim"] = c.dim;
  d["counts"] = to_index_array(c.counts);
  d["alphas"] = to_array(c.alphas);
  d["q"] = to_array(c.q);
  d["delta"] = to_array(c.delta);
  return d;
}

DistortionCurve curve_from_dict(const py::dict& d, int fallback_id) {
  DistortionCurve c;
  c.layer_id = d.contains("layer_id") ? d["layer_id"].cast<int>() : fallback_id;
  c.dim = d["dim"].cast<std::size_t>();
  c.counts = d["counts"].cast<std::vector<std::size_t>>();
  c.delta = d["delta"].cast<std::vector<double>>();
  for (auto k : c.counts) c.alphas.push_back(static_cast<double>(k) / static_cast<double>(c.dim));
  c.q = d.contains("q") ? d["q"].cast<std::vector<double>>() : std::vector<double>(c.delta.size(), 0.0);
  return c;
}

std::vector<DistortionCurve> curves_from_list(const py::list& l) {
  std::vector<DistortionCurve> out;
  for (auto item : l) out.push_back(curve_from_dict(item.cast<py::dict>(), static_cast<int>(out.size())));
  return out;
}

Budget make_budget(std::optional<std::size_t> prune_count, std::optional<double> flops_ratio,
                   std::optional<std::vector<double>> costs, double quantum) {
  if (prune_count.has_value() == flops_ratio.has_value()) throw Error("give exactly one of prune_count or flops_ratio");
  if (prune_count) return CountBudget{*prune_count, {}};
  if (!costs) throw Error("flops_ratio needs per-layer costs");
  return FlopsBudget{*flops_ratio, *costs, quantum};
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

}  // namespace

PYBIND11_MODULE(_dmprune, m) {
  m.doc() = "Post-training pruning engine: Taylor scores, Fisher distortion curves and DP sparsity allocation";

  py::register_exception<Error>(m, "DmpruneError", PyExc_ValueError);

  m.def("taylor_scores", [](const Array& w, const Array& g) {
    const auto s = taylor_scores(to_tensor(w), to_tensor(g));
    return to_array(s).reshape(std::vector<py::ssize_t>(w.shape(), w.shape() + w.ndim()));
  }, py::arg("weight"), py::arg("avg_grad"));

  m.def("prune_order", [](const Array& s) { return to_index_array(prune_order(flat(s))); }, py::arg("scores"));

  m.def("count_grid", &count_grid, py::arg("dim"), py::arg("k_points"));

  m.def("default_kappa", [](const Array& g) {
    if (g.ndim() != 2) throw Error("per-sample gradients must be a 2-D array (N, D)");
    return default_kappa(flat(g), static_cast<std::size_t>(g.shape(0)), static_cast<std::size_t>(g.shape(1)));
  }, py::arg("per_sample"));

  py::class_<FisherMatrix>(m, "Fisher")
      .def(py::init(&make_fisher), py::arg("per_sample"), py::arg("kappa") = py::none(), py::arg("mode") = "auto")
      .def_property_readonly("dim", &FisherMatrix::dim)
      .def_property_readonly("rows", &FisherMatrix::rows)
      .def_property_readonly("kappa", &FisherMatrix::kappa)
      .def_property_readonly("mode", [](const FisherMatrix& f) { return std::string(to_string(f.mode())); })
      .def("quad_form", [](const FisherMatrix& f, const Array& v) { return f.quad_form(SparseVector::from_dense(flat(v))); })
      .def("cross_form", [](const FisherMatrix& f, const Array& u, const Array& v) {
        return f.cross_form(SparseVector::from_dense(flat(u)), SparseVector::from_dense(flat(v)));
      })
      .def("to_dense", [](const FisherMatrix& f) {
        const auto d = static_cast<std::int64_t>(f.dim());
        return to_array(Tensor({d, d}, f.to_dense()));
      });

  m.def("delta_curve", [](const Array& w, const Array& g, const Array& per_sample, std::optional<std::vector<std::size_t>> counts,
                          std::size_t k, std::optional<double> kappa, const std::string& delta_mode,
                          const std::string& fisher, const std::string& method) {
    const auto wt = to_tensor(w), gt = to_tensor(g);
    const auto f = make_fisher(per_sample, kappa, fisher);
    const auto order = prune_order(taylor_scores(wt, gt).data);
    const auto grid = counts.value_or(count_grid(wt.size(), k));
    const LayerCurveInput in{0, &wt, &gt, &f};
    const auto mode = delta_mode_from_string(delta_mode);
    if (method == "direct") return curve_to_dict(delta_curve_direct(in, order, grid, mode));
    if (method != "incremental") throw Error("method must be 'incremental' or 'direct'");
    return curve_to_dict(delta_curve_incremental(in, order, grid, mode));
  }, py::arg("weight"), py::arg("avg_grad"), py::arg("per_sample"), py::arg("counts") = py::none(), py::arg("k") = 20,
     py::arg("kappa") = py::none(), py::arg("delta_mode") = "squared", py::arg("fisher") = "auto",
     py::arg("method") = "incremental");

  auto alloc = [](auto fn) {
    return [fn](const py::list& curves, std::optional<std::size_t> prune_count, std::optional<double> flops_ratio,
                std::optional<std::vector<double>> costs, double quantum) {
      const auto cs = curves_from_list(curves);
      return json_to_py(to_json(fn(cs, make_budget(prune_count, flops_ratio, costs, quantum))));
    };
  };
  m.def("dp_allocate", alloc([](const auto& cs, const Budget& b) { return dp_allocate(cs, b); }), py::arg("curves"),
        py::arg("prune_count") = py::none(), py::arg("flops_ratio") = py::none(), py::arg("costs") = py::none(),
        py::arg("quantum") = 0.0);
  m.def("brute_force_allocate", alloc([](const auto& cs, const Budget& b) { return brute_force_allocate(cs, b); }),
        py::arg("curves"), py::arg("prune_count") = py::none(), py::arg("flops_ratio") = py::none(),
        py::arg("costs") = py::none(), py::arg("quantum") = 0.0);

  m.def("load_bundle", [](const std::string& path) -> py::dict {
    const auto any = load_bundle(path);
    if (const auto* mb = std::get_if<ModelBundle>(&any)) return model_to_dict(*mb);
    if (const auto* gb = std::get_if<GradientBundle>(&any)) return grads_to_dict(*gb);
    return calib_to_dict(std::get<CalibrationSet>(any));
  }, py::arg("path"));

  m.def("save_bundle", [](const py::dict& d, const std::string& path) {
    const auto kind = d["kind"].cast<std::string>();
    if (kind == "model") save_bundle(model_from_dict(d), path);
    else if (kind == "gradients") save_bundle(grads_from_dict(d), path);
    else if (kind == "calibration") save_bundle(calib_from_dict(d), path);
    else throw Error("unknown bundle kind '" + kind + "'");
  }, py::arg("bundle"), py::arg("path"));

  m.def("run_prune", [](const std::string& model_path, const std::string& grads_path, const std::string& out_path,
                        std::optional<double> flops_ratio, std::optional<std::size_t> prune_count, std::size_t k,
                        std::optional<std::string> calib_path, std::uint64_t seed) {
    PipelineConfig cfg;
    cfg.k_points = k;
    cfg.seed = seed;
    cfg.timestamps = false;
    if (prune_count) cfg.prune_count = prune_count;
    else cfg.flops_ratio = flops_ratio.value_or(0.5);
    const auto model = load_model(model_path);
    const auto grads = load_gradients(grads_path);
    cfg.lambda = {grads.lambda_used.first, grads.lambda_used.second};
    std::optional<CalibrationSet> calib;
    if (calib_path) calib = load_calibration(*calib_path);
    const auto out = run_prune(model, grads, cfg, calib ? &*calib : nullptr);
    save_bundle(out.pruned, out_path);
    return json_to_py(out.report);
  }, py::arg("model"), py::arg("grads"), py::arg("out"), py::arg("flops_ratio") = py::none(),
     py::arg("prune_count") = py::none(), py::arg("k") = 20, py::arg("calib") = py::none(), py::arg("seed") = 42);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"));
}
