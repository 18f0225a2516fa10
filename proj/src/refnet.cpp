#include "dmprune/refnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "dmprune/rng.hpp"

namespace dmprune {

void RefNetSpec::validate() const {
  if (in_channels <= 0 || height <= 0 || width <= 0) throw Error("refnet: input shape must be positive");
  if (trunk.size() < 2) throw Error("refnet: at least 2 trunk layers are required");
  int ch = in_channels;
  for (const auto& c : trunk) {
    if (c.in_ch != ch) throw Error("refnet: trunk layer shapes do not compose");
    if (c.out_ch <= 0 || c.kh <= 0 || c.kw <= 0 || c.kh % 2 == 0 || c.kw % 2 == 0)
      throw Error("refnet: conv kernels must be positive and odd");
    ch = c.out_ch;
  }
  if (pool <= 0 || height % pool != 0 || width % pool != 0)
    throw Error("refnet: pool size must divide the input extent");
  if (num_boxes <= 0 || box_dims <= 0 || num_classes <= 0) throw Error("refnet: head sizes must be positive");
}

std::size_t RefNetSpec::input_size() const {
  return static_cast<std::size_t>(in_channels) * static_cast<std::size_t>(height * width);
}

std::size_t RefNetSpec::feature_size() const {
  return static_cast<std::size_t>(trunk.back().out_ch) * static_cast<std::size_t>((height / pool) * (width / pool));
}

Shape RefNetSpec::weight_shape(std::size_t layer) const {
  if (layer < trunk.size()) {
    const auto& c = trunk[layer];
    return {c.out_ch, c.in_ch, c.kh, c.kw};
  }
  const auto f = static_cast<std::int64_t>(feature_size());
  if (layer == trunk.size()) return {static_cast<std::int64_t>(box_outputs()), f};
  return {static_cast<std::int64_t>(conf_outputs()), f};
}

std::string RefNetSpec::layer_name(std::size_t layer) const {
  if (layer < trunk.size()) return "trunk" + std::to_string(layer);
  return layer == trunk.size() ? "box_head" : "conf_head";
}

std::string RefNetSpec::to_json() const {
  nlohmann::json j;
  j["input"] = {in_channels, height, width};
  j["trunk"] = nlohmann::json::array();
  for (const auto& c : trunk) j["trunk"].push_back({c.out_ch, c.in_ch, c.kh, c.kw});
  j["pool"] = pool;
  j["num_boxes"] = num_boxes;
  j["box_dims"] = box_dims;
  j["num_classes"] = num_classes;
  j["activation"] = activation == Activation::relu ? "relu" : "identity";
  j["seed"] = seed;
  return j.dump();
}

RefNetSpec RefNetSpec::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RefNetSpec s;
    const auto in = j.at("input").get<std::vector<int>>();
    if (in.size() != 3) throw Error("refnet spec: input must be [C, H, W]");
    s.in_channels = in[0];
    s.height = in[1];
    s.width = in[2];
    s.trunk.clear();
    for (const auto& t : j.at("trunk")) {
      const auto v = t.get<std::vector<int>>();
      if (v.size() != 4) throw Error("refnet spec: trunk entries must be [out, in, kh, kw]");
      s.trunk.push_back({v[0], v[1], v[2], v[3]});
    }
    s.pool = j.at("pool").get<int>();
    s.num_boxes = j.at("num_boxes").get<int>();
    s.box_dims = j.at("box_dims").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    s.activation = j.at("activation").get<std::string>() == "identity" ? Activation::identity : Activation::relu;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("refnet spec: ") + e.what());
  }
}

RefNetParams zero_params(const RefNetSpec& spec) {
  spec.validate();
  RefNetParams p;
  for (std::size_t i = 0; i < spec.layer_count(); ++i) {
    const auto shape = spec.weight_shape(i);
    p.weights.emplace_back(shape);
    p.biases.emplace_back(Shape{shape[0]});
  }
  return p;
}

RefNetParams init_params(const RefNetSpec& spec) {
  RefNetParams p = zero_params(spec);
  Rng rng(spec.seed);
  for (std::size_t i = 0; i < spec.layer_count(); ++i) {
    const auto& shape = p.weights[i].shape;
    const double fan_in = static_cast<double>(p.weights[i].size()) / static_cast<double>(shape[0]);
    const double gain = i < spec.trunk.size() ? 2.0 : 1.0;
    const double stddev = std::sqrt(gain / fan_in);
    for (double& w : p.weights[i].data) w = rng.normal(0.0, stddev);
    for (double& b : p.biases[i].data) b = rng.normal(0.0, 0.05);
  }
  return p;
}

namespace {

struct Conv {
  int in_ch, out_ch, kh, kw, h, w;
};

Conv conv_geometry(const RefNetSpec& spec, std::size_t layer) {
  const auto& c = spec.trunk[layer];
  return {c.in_ch, c.out_ch, c.kh, c.kw, spec.height, spec.width};
}

// Same-padded, stride-1 convolution.
void conv_forward(const Conv& g, std::span<const double> in, const Tensor& weight, const Tensor& bias,
                  std::vector<double>& out) {
  const int ph = g.kh / 2, pw = g.kw / 2;
  out.assign(static_cast<std::size_t>(g.out_ch * g.h * g.w), 0.0);
  for (int o = 0; o < g.out_ch; ++o) {
    double* dst = out.data() + static_cast<std::size_t>(o * g.h * g.w);
    std::fill(dst, dst + g.h * g.w, bias.data[static_cast<std::size_t>(o)]);
    for (int c = 0; c < g.in_ch; ++c) {
      const double* src = in.data() + static_cast<std::size_t>(c * g.h * g.w);
      for (int dy = 0; dy < g.kh; ++dy) {
        for (int dx = 0; dx < g.kw; ++dx) {
          const double wv = weight.data[static_cast<std::size_t>(((o * g.in_ch + c) * g.kh + dy) * g.kw + dx)];
          if (wv == 0.0) continue;
          const int y0 = std::max(0, ph - dy), y1 = std::min(g.h, g.h + ph - dy);
          const int x0 = std::max(0, pw - dx), x1 = std::min(g.w, g.w + pw - dx);
          for (int y = y0; y < y1; ++y) {
            const double* s = src + (y + dy - ph) * g.w + (dx - pw);
            double* d = dst + y * g.w;
            for (int x = x0; x < x1; ++x) d[x] += wv * s[x];
          }
        }
      }
    }
  }
}

void conv_backward(const Conv& g, std::span<const double> in, const Tensor& weight,
                   std::span<const double> d_out, Tensor& d_weight, Tensor& d_bias,
                   std::vector<double>* d_in) {
  const int ph = g.kh / 2, pw = g.kw / 2;
  if (d_in) d_in->assign(static_cast<std::size_t>(g.in_ch * g.h * g.w), 0.0);
  for (int o = 0; o < g.out_ch; ++o) {
    const double* go = d_out.data() + static_cast<std::size_t>(o * g.h * g.w);
    d_bias.data[static_cast<std::size_t>(o)] += std::accumulate(go, go + g.h * g.w, 0.0);
    for (int c = 0; c < g.in_ch; ++c) {
      const double* src = in.data() + static_cast<std::size_t>(c * g.h * g.w);
      double* gin = d_in ? d_in->data() + static_cast<std::size_t>(c * g.h * g.w) : nullptr;
      for (int dy = 0; dy < g.kh; ++dy) {
        for (int dx = 0; dx < g.kw; ++dx) {
          const auto widx = static_cast<std::size_t>(((o * g.in_ch + c) * g.kh + dy) * g.kw + dx);
          const double wv = weight.data[widx];
          const int y0 = std::max(0, ph - dy), y1 = std::min(g.h, g.h + ph - dy);
          const int x0 = std::max(0, pw - dx), x1 = std::min(g.w, g.w + pw - dx);
          double acc = 0.0;
          for (int y = y0; y < y1; ++y) {
            const int off = (y + dy - ph) * g.w + (dx - pw);
            const double* s = src + off;
            const double* gd = go + y * g.w;
            for (int x = x0; x < x1; ++x) acc += gd[x] * s[x];
            if (gin && wv != 0.0) {
              double* gi = gin + off;
              for (int x = x0; x < x1; ++x) gi[x] += wv * gd[x];
            }
          }
          d_weight.data[widx] += acc;
        }
      }
    }
  }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Trace {
  std::vector<std::vector<double>> inputs;  // input of each trunk layer
  std::vector<std::vector<double>> pre;     // pre-activation of each trunk layer
  std::vector<double> features;
  RefNetOutput out;
};

void check_input(const RefNetSpec& spec, const RefNetParams& params, std::span<const double> x) {
  if (x.size() != spec.input_size()) throw Error("refnet: input does not match the spec's input shape");
  if (params.weights.size() != spec.layer_count() || params.biases.size() != spec.layer_count())
    throw Error("refnet: parameter count does not match the spec");
  for (std::size_t i = 0; i < spec.layer_count(); ++i)
    if (params.weights[i].shape != spec.weight_shape(i)) throw Error("refnet: weight shape mismatch");
}

Trace run_forward(const RefNetSpec& spec, const RefNetParams& params, std::span<const double> x) {
  check_input(spec, params, x);
  Trace t;
  std::vector<double> act(x.begin(), x.end());
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
    t.inputs.push_back(act);
    std::vector<double> pre;
    conv_forward(conv_geometry(spec, i), act, params.weights[i], params.biases[i], pre);
    act = pre;
    if (spec.activation == Activation::relu)
      for (double& v : act) v = v > 0.0 ? v : 0.0;
    t.pre.push_back(std::move(pre));
  }
  const int ch = spec.trunk.back().out_ch;
  const int ph = spec.height / spec.pool, pw = spec.width / spec.pool;
  const double scale = 1.0 / static_cast<double>(spec.pool * spec.pool);
  t.features.assign(spec.feature_size(), 0.0);
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x)
        t.features[static_cast<std::size_t>((c * ph + y / spec.pool) * pw + x / spec.pool)] +=
            act[static_cast<std::size_t>((c * spec.height + y) * spec.width + x)] * scale;

  auto dense = [&](std::size_t layer, std::vector<double>& out) {
    const auto& w = params.weights[layer];
    const auto& b = params.biases[layer];
    const auto rows = static_cast<std::size_t>(w.shape[0]);
    const auto cols = static_cast<std::size_t>(w.shape[1]);
    out.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = b.data[r];
      for (std::size_t c = 0; c < cols; ++c) s += w.data[r * cols + c] * t.features[c];
      out[r] = s;
    }
  };
  dense(spec.trunk.size(), t.out.boxes);
  dense(spec.trunk.size() + 1, t.out.conf);
  for (double& v : t.out.conf) v = sigmoid(v);
  return t;
}

}  // namespace

RefNetOutput forward(const RefNetSpec& spec, const RefNetParams& params, std::span<const double> x) {
  return run_forward(spec, params, x).out;
}

double min_abs_preactivation(const RefNetSpec& spec, const RefNetParams& params, std::span<const double> x) {
  const auto t = run_forward(spec, params, x);
  double m = std::numeric_limits<double>::infinity();
  for (const auto& layer : t.pre)
    for (double v : layer) m = std::min(m, std::abs(v));
  return m;
}

RefNetParams backward(const RefNetSpec& spec, const RefNetParams& params, std::span<const double> x,
                      std::span<const double> d_boxes, std::span<const double> d_conf) {
  const Trace t = run_forward(spec, params, x);
  if (d_boxes.size() != spec.box_outputs() || d_conf.size() != spec.conf_outputs())
    throw Error("refnet backward: output gradient size mismatch");
  RefNetParams g = zero_params(spec);
  const std::size_t feat = spec.feature_size();
  std::vector<double> d_feat(feat, 0.0);

  auto dense_back = [&](std::size_t layer, std::span<const double> d_out) {
    const auto& w = params.weights[layer];
    auto& gw = g.weights[layer];
    auto& gb = g.biases[layer];
    for (std::size_t r = 0; r < d_out.size(); ++r) {
      const double d = d_out[r];
      gb.data[r] += d;
      for (std::size_t c = 0; c < feat; ++c) {
        gw.data[r * feat + c] += d * t.features[c];
        d_feat[c] += d * w.data[r * feat + c];
      }
    }
  };
  dense_back(spec.trunk.size(), d_boxes);
  std::vector<double> d_z(d_conf.size());
  for (std::size_t r = 0; r < d_z.size(); ++r) {
    const double s = t.out.conf[r];
    d_z[r] = d_conf[r] * s * (1.0 - s);
  }
  dense_back(spec.trunk.size() + 1, d_z);

  const int ch = spec.trunk.back().out_ch;
  const int ph = spec.height / spec.pool, pw = spec.width / spec.pool;
  const double scale = 1.0 / static_cast<double>(spec.pool * spec.pool);
  std::vector<double> d_act(static_cast<std::size_t>(ch * spec.height * spec.width));
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x)
        d_act[static_cast<std::size_t>((c * spec.height + y) * spec.width + x)] =
            d_feat[static_cast<std::size_t>((c * ph + y / spec.pool) * pw + x / spec.pool)] * scale;

  for (std::size_t i = spec.trunk.size(); i-- > 0;) {
    if (spec.activation == Activation::relu) {
      // subgradient 0 at the kink
      for (std::size_t j = 0; j < d_act.size(); ++j)
        if (!(t.pre[i][j] > 0.0)) d_act[j] = 0.0;
    }
    std::vector<double> d_in;
    conv_backward(conv_geometry(spec, i), t.inputs[i], params.weights[i], d_act, g.weights[i], g.biases[i],
                  i > 0 ? &d_in : nullptr);
    d_act = std::move(d_in);
  }
  return g;
}

void LambdaWeights::validate() const {
  if (!(box >= 0.0) || !(conf >= 0.0) || !std::isfinite(box) || !std::isfinite(conf))
    throw Error("lambda weights must be finite and nonnegative");
  if (box == 0.0 && conf == 0.0) throw Error("lambda weights must not both be zero");
}

Scalarizer::Scalarizer(const RefNetSpec& spec, LambdaWeights lambda)
    : lambda_(lambda), box_(spec.box_outputs(), lambda.box), conf_(spec.conf_outputs(), lambda.conf) {
  lambda_.validate();
}

Scalarizer Scalarizer::random_probe(const RefNetSpec& spec, LambdaWeights lambda, std::uint64_t seed) {
  Scalarizer s(spec, lambda);
  Rng rng(seed);
  for (double& w : s.box_) w = lambda.box * rng.normal();
  for (double& w : s.conf_) w = lambda.conf * rng.normal();
  return s;
}

double Scalarizer::operator()(const RefNetOutput& out) const {
  double u = 0.0;
  for (std::size_t r = 0; r < out.boxes.size(); ++r) u += box_[r] * out.boxes[r];
  for (std::size_t r = 0; r < out.conf.size(); ++r) u += conf_[r] * out.conf[r];
  return u;
}

double scalarize(const RefNetOutput& out, const LambdaWeights& lambda) {
  lambda.validate();
  const double sb = std::accumulate(out.boxes.begin(), out.boxes.end(), 0.0);
  const double sc = std::accumulate(out.conf.begin(), out.conf.end(), 0.0);
  return lambda.box * sb + lambda.conf * sc;
}

RefNetParams backward_scalarized(const RefNetSpec& spec, const RefNetParams& params,
                                 std::span<const double> x, const Scalarizer& scalarizer) {
  return backward(spec, params, x, scalarizer.box_weights(), scalarizer.conf_weights());
}

CalibrationSet synth_calibration(const RefNetSpec& spec, std::size_t count, std::uint64_t seed) {
  spec.validate();
  if (count < 1) throw Error("calibration set needs N >= 1");
  CalibrationSet c;
  c.seed = seed;
  c.inputs = Tensor({static_cast<std::int64_t>(count), spec.in_channels, spec.height, spec.width});
  Rng rng(seed);
  for (double& v : c.inputs.data) v = rng.normal();
  c.meta["generator"] = "standard-normal";
  c.meta["seed"] = std::to_string(seed);
  return c;
}

namespace {
void check_calib(const RefNetSpec& spec, const CalibrationSet& calib) {
  calib.validate();
  if (calib.sample_size() != spec.input_size()) throw Error("calibration inputs do not match the refnet input shape");
}
}  // namespace

GradientBundle build_gradient_bundle(const RefNetSpec& spec, const RefNetParams& params,
                                     const CalibrationSet& calib, const Scalarizer& scalarizer) {
  check_calib(spec, calib);
  const std::size_t n = calib.count();
  GradientBundle gb;
  gb.n_samples = static_cast<int>(n);
  gb.lambda_used = {scalarizer.lambda().box, scalarizer.lambda().conf};
  for (std::size_t i = 0; i < spec.layer_count(); ++i) {
    LayerGradient lg;
    lg.layer_id = static_cast<int>(i);
    lg.name = spec.layer_name(i) + ".weight";
    lg.avg_grad = Tensor(spec.weight_shape(i));
    lg.per_sample = Tensor({static_cast<std::int64_t>(n), static_cast<std::int64_t>(lg.avg_grad.size())});
    gb.layers.push_back(std::move(lg));
  }
  for (std::size_t s = 0; s < n; ++s) {
    const auto g = backward_scalarized(spec, params, calib.sample(s), scalarizer);
    for (std::size_t i = 0; i < spec.layer_count(); ++i) {
      const auto& src = g.weights[i].data;
      std::copy(src.begin(), src.end(), gb.layers[i].per_sample->data.begin() + static_cast<std::ptrdiff_t>(s * src.size()));
    }
  }
  for (auto& lg : gb.layers) {
    const std::size_t d = lg.avg_grad.size();
    for (std::size_t j = 0; j < d; ++j) {
      double sum = 0.0;
      for (std::size_t s = 0; s < n; ++s) sum += lg.per_sample->data[s * d + j];
      lg.avg_grad.data[j] = sum / static_cast<double>(n);
    }
  }
  gb.meta["source"] = "refnet";
  return gb;
}

double true_distortion(const RefNetSpec& spec, const RefNetParams& dense, const RefNetParams& pruned,
                       const CalibrationSet& calib, const Scalarizer& scalarizer) {
  check_calib(spec, calib);
  double s = 0.0;
  for (std::size_t n = 0; n < calib.count(); ++n) {
    const double d = scalarizer(forward(spec, dense, calib.sample(n))) - scalarizer(forward(spec, pruned, calib.sample(n)));
    s += d * d;
  }
  return s / static_cast<double>(calib.count());
}

ModelBundle to_bundle(const RefNetSpec& spec, const RefNetParams& params) {
  spec.validate();
  ModelBundle b;
  const std::size_t layers = spec.layer_count();
  const double positions = static_cast<double>(spec.height * spec.width);
  for (std::size_t i = 0; i < layers; ++i) {
    LayerRecord l;
    l.layer_id = static_cast<int>(i);
    l.name = spec.layer_name(i) + ".weight";
    l.kind = i < spec.trunk.size() ? LayerKind::conv2d : LayerKind::dense;
    l.weight = params.weights[i];
    l.flops_per_weight = i < spec.trunk.size() ? 2.0 * positions : 2.0;
    l.prunable = true;
    b.layers.push_back(std::move(l));
  }
  for (std::size_t i = 0; i < layers; ++i) {
    LayerRecord l;
    l.layer_id = static_cast<int>(layers + i);
    l.name = spec.layer_name(i) + ".bias";
    l.kind = LayerKind::opaque;
    l.weight = params.biases[i];
    l.flops_per_weight = i < spec.trunk.size() ? positions : 1.0;
    l.prunable = false;
    b.layers.push_back(std::move(l));
  }
  b.meta["model"] = "refnet";
  b.meta["refnet_spec"] = spec.to_json();
  b.meta["seed"] = std::to_string(spec.seed);
  return b;
}

bool is_refnet_bundle(const ModelBundle& bundle) {
  const auto it = bundle.meta.find("model");
  return it != bundle.meta.end() && it->second == "refnet" && bundle.meta.contains("refnet_spec");
}

RefNetSpec spec_from_bundle(const ModelBundle& bundle) {
  if (!is_refnet_bundle(bundle)) throw Error("bundle does not carry a refnet spec");
  return RefNetSpec::from_json(bundle.meta.at("refnet_spec"));
}

RefNetParams params_from_bundle(const ModelBundle& bundle) {
  const RefNetSpec spec = spec_from_bundle(bundle);
  const std::size_t layers = spec.layer_count();
  if (bundle.layers.size() != 2 * layers) throw Error("refnet bundle has the wrong number of layers");
  RefNetParams p;
  for (std::size_t i = 0; i < layers; ++i) {
    if (bundle.layers[i].weight.shape != spec.weight_shape(i)) throw Error("refnet bundle weight shape mismatch");
    p.weights.push_back(bundle.layers[i].weight);
    const auto& bias = bundle.layers[layers + i].weight;
    if (bias.shape != Shape{spec.weight_shape(i)[0]}) throw Error("refnet bundle bias shape mismatch");
    p.biases.push_back(bias);
  }
  return p;
}

namespace {

void apply_masks(RefNetParams& p, std::span<const Tensor> masks) {
  for (std::size_t i = 0; i < masks.size() && i < p.weights.size(); ++i) {
    if (masks[i].data.empty()) continue;
    for (std::size_t j = 0; j < masks[i].size(); ++j)
      if (masks[i].data[j] == 0.0) p.weights[i].data[j] = 0.0;
  }
}

struct Targets {
  std::vector<RefNetOutput> outputs;
};

double distill_loss(const RefNetSpec& spec, const RefNetParams& p, const CalibrationSet& train,
                    const Targets& targets) {
  double s = 0.0;
  for (std::size_t n = 0; n < train.count(); ++n) {
    const auto out = forward(spec, p, train.sample(n));
    const auto& t = targets.outputs[n];
    for (std::size_t r = 0; r < out.boxes.size(); ++r) s += 0.5 * (out.boxes[r] - t.boxes[r]) * (out.boxes[r] - t.boxes[r]);
    for (std::size_t r = 0; r < out.conf.size(); ++r) s += 0.5 * (out.conf[r] - t.conf[r]) * (out.conf[r] - t.conf[r]);
  }
  return s / static_cast<double>(train.count());
}

}  // namespace

FinetuneResult finetune(const RefNetSpec& spec, const RefNetParams& pruned, const RefNetParams& teacher,
                        std::span<const Tensor> masks, const CalibrationSet& train,
                        const FinetuneOptions& options) {
  check_calib(spec, train);
  if (!(options.step_size > 0.0)) throw Error("finetune: step size must be > 0");
  if (masks.size() > spec.layer_count()) throw Error("finetune: more masks than layers");
  for (std::size_t i = 0; i < masks.size(); ++i)
    if (!masks[i].data.empty() && masks[i].shape != spec.weight_shape(i))
      throw Error("finetune: mask shape does not match weight shape");

  FinetuneResult result;
  result.params = pruned;
  apply_masks(result.params, masks);
  if (options.epochs == 0) {
    result.params = pruned;
    return result;
  }

  Targets targets;
  for (std::size_t n = 0; n < train.count(); ++n) targets.outputs.push_back(forward(spec, teacher, train.sample(n)));

  const double initial = distill_loss(spec, result.params, train, targets);
  result.loss_history.push_back(initial);
  double loss = initial;
  double lr = options.step_size;
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  Rng rng(options.seed);
  std::vector<std::size_t> perm(train.count());
  std::iota(perm.begin(), perm.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    RefNetParams candidate = result.params;
    for (std::size_t t = perm.size(); t > 1; --t) std::swap(perm[t - 1], perm[rng.index(t)]);
    for (std::size_t start = 0; start < perm.size(); start += batch) {
      const std::size_t end = std::min(perm.size(), start + batch);
      RefNetParams grad = zero_params(spec);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t n = perm[b];
        const auto out = forward(spec, candidate, train.sample(n));
        const auto& tg = targets.outputs[n];
        std::vector<double> db(out.boxes.size()), dc(out.conf.size());
        for (std::size_t r = 0; r < db.size(); ++r) db[r] = out.boxes[r] - tg.boxes[r];
        for (std::size_t r = 0; r < dc.size(); ++r) dc[r] = out.conf[r] - tg.conf[r];
        const auto g = backward(spec, candidate, train.sample(n), db, dc);
        for (std::size_t i = 0; i < spec.layer_count(); ++i) {
          for (std::size_t j = 0; j < g.weights[i].size(); ++j) grad.weights[i].data[j] += g.weights[i].data[j];
          for (std::size_t j = 0; j < g.biases[i].size(); ++j) grad.biases[i].data[j] += g.biases[i].data[j];
        }
      }
      const double scale = lr / static_cast<double>(end - start);
      for (std::size_t i = 0; i < spec.layer_count(); ++i) {
        for (std::size_t j = 0; j < grad.weights[i].size(); ++j) candidate.weights[i].data[j] -= scale * grad.weights[i].data[j];
        for (std::size_t j = 0; j < grad.biases[i].size(); ++j) candidate.biases[i].data[j] -= scale * grad.biases[i].data[j];
      }
      apply_masks(candidate, masks);
    }
    const double next = distill_loss(spec, candidate, train, targets);
    ++result.epochs_run;
    if (!std::isfinite(next) || next > 10.0 * initial)
      throw Error("finetune diverged: loss " + std::to_string(next) + " exceeds 10x the initial " +
                  std::to_string(initial) + " at epoch " + std::to_string(epoch + 1) +
                  " with step size " + std::to_string(lr));
    if (next <= loss) {
      result.params = std::move(candidate);
      loss = next;
    } else {
      lr *= 0.5;
    }
    result.loss_history.push_back(loss);
    if (lr < options.step_size * 1e-6) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace dmprune
