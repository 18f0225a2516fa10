#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dmprune/dmb.hpp"
#include "dmprune/oracles.hpp"
#include "dmprune/pipeline.hpp"
#include "dmprune/refnet.hpp"
#include "golden.hpp"

using namespace dmprune;

namespace {

std::vector<double> seeded_input(const RefNetSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return oracle::normals(rng, spec.input_size());
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

std::vector<Tensor> no_masks(const RefNetSpec& spec) { return std::vector<Tensor>(spec.layer_count()); }

}  // namespace

TEST_CASE("default spec shapes") {
  const RefNetSpec spec;
  CHECK_NOTHROW(spec.validate());
  CHECK(spec.input_size() == 3 * 16 * 16);
  CHECK(spec.feature_size() == 128);
  CHECK(spec.layer_count() == 4);
  CHECK(spec.weight_shape(0) == Shape{8, 3, 3, 3});
  CHECK(spec.weight_shape(2) == Shape{28, 128});
  CHECK(spec.weight_shape(3) == Shape{12, 128});
  std::size_t weights = 0;
  for (std::size_t i = 0; i < spec.layer_count(); ++i) weights += shape_size(spec.weight_shape(i));
  CHECK(weights == 216 + 576 + 3584 + 1536);

  RefNetSpec one_conv;
  one_conv.trunk.resize(1);
  CHECK_THROWS_AS(one_conv.validate(), Error);
  RefNetSpec bad_chain;
  bad_chain.trunk[1].in_ch = 5;
  CHECK_THROWS_AS(bad_chain.validate(), Error);

  RefNetSpec other;
  other.num_boxes = 2;
  other.seed = 9;
  CHECK(RefNetSpec::from_json(other.to_json()) == other);
}

TEST_CASE("forward on zero parameters and zero inputs") {
  const RefNetSpec spec;
  const auto x = seeded_input(spec, 1);
  const auto zero = forward(spec, zero_params(spec), x);
  CHECK(zero.boxes.size() == 28);
  CHECK(zero.conf.size() == 12);
  for (double b : zero.boxes) CHECK(b == 0.0);
  for (double c : zero.conf) CHECK(c == 0.5);

  auto params = init_params(spec);
  for (auto& b : params.biases) std::fill(b.data.begin(), b.data.end(), 0.0);
  const auto out = forward(spec, params, std::vector<double>(spec.input_size(), 0.0));
  for (double b : out.boxes) CHECK(b == 0.0);
  for (double c : out.conf) CHECK(c == 0.5);

  CHECK_THROWS_AS(forward(spec, params, std::vector<double>(5, 0.0)), Error);
}

TEST_CASE("seeded forward output is locked") {
  const RefNetSpec spec;
  const auto out = forward(spec, init_params(spec), seeded_input(spec, 42));
  std::string text;
  for (double v : out.boxes) text += format_real(v) + "\n";
  for (double v : out.conf) text += format_real(v) + "\n";
  CHECK(golden::matches("refnet_forward_seed42.txt", text));
}

TEST_CASE("scalarization") {
  RefNetSpec spec;
  spec.num_boxes = 2;
  const auto x = seeded_input(spec, 2);
  const auto out = forward(spec, init_params(spec), x);
  CHECK(scalarize(out, {1, 0}) == doctest::Approx(sum(out.boxes)));
  CHECK(scalarize(out, {1, 1}) == doctest::Approx(sum(out.boxes) + sum(out.conf)));
  const auto half = forward(spec, zero_params(spec), x);
  CHECK(scalarize(half, {0, 1}) == 3.0);
  CHECK(Scalarizer(spec, {2, 3})(out) == doctest::Approx(scalarize(out, {2, 3})));

  CHECK_THROWS_AS(LambdaWeights({0, 0}).validate(), Error);
  CHECK_THROWS_AS(LambdaWeights({-1, 1}).validate(), Error);
  CHECK_THROWS_AS(Scalarizer(spec, {0, 0}), Error);

  const auto p1 = Scalarizer::random_probe(spec, {1, 1}, 4);
  const auto p2 = Scalarizer::random_probe(spec, {1, 1}, 4);
  CHECK(p1(out) == p2(out));
  CHECK(std::vector<double>(p1.box_weights().begin(), p1.box_weights().end()) !=
        std::vector<double>(p1.box_weights().size(), 1.0));
}

TEST_CASE("backward closed forms") {
  RefNetSpec spec;
  spec.activation = Activation::identity;
  auto params = init_params(spec);
  for (auto& b : params.biases) std::fill(b.data.begin(), b.data.end(), 0.0);
  const std::vector<double> zero_x(spec.input_size(), 0.0);
  const auto g0 = backward_scalarized(spec, params, zero_x, Scalarizer(spec, {1, 1}));
  for (std::size_t i = 0; i < spec.trunk.size(); ++i)
    for (double v : g0.weights[i].data) CHECK(v == 0.0);

  // u = lambda_b * sum(W_b f + b_b): every row of dW_b is lambda_b * f
  const RefNetSpec relu;
  const auto p = init_params(relu);
  const auto x = seeded_input(relu, 3);
  const auto g = backward_scalarized(relu, p, x, Scalarizer(relu, {2.5, 0}));
  const std::size_t f = relu.feature_size();
  for (std::size_t r = 1; r < relu.box_outputs(); ++r)
    for (std::size_t j = 0; j < f; ++j) CHECK(g.weights[2].data[r * f + j] == g.weights[2].data[j]);
  for (double b : g.biases[2].data) CHECK(b == 2.5);
  for (double v : g.weights[3].data) CHECK(v == 0.0);
  auto shifted = p;
  shifted.weights[2].data[5] += 1e-6;
  const double fd = (scalarize(forward(relu, shifted, x), {2.5, 0}) - scalarize(forward(relu, p, x), {2.5, 0})) / 1e-6;
  CHECK(g.weights[2].data[5] == doctest::Approx(fd).epsilon(1e-6));
}

TEST_CASE("gradients match central differences") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    RefNetSpec spec;
    spec.seed = seed;
    auto params = init_params(spec);
    const auto sc = Scalarizer::random_probe(spec, {1, 0.5}, seed);
    std::vector<double> x;
    Rng rng(seed);
    do x = oracle::normals(rng, spec.input_size());
    while (min_abs_preactivation(spec, params, x) <= 1e-4);
    const auto g = backward_scalarized(spec, params, x, sc);
    for (std::size_t layer = 0; layer < spec.layer_count(); ++layer) {
      auto& w = params.weights[layer];
      for (std::size_t probe = 0; probe < 20; ++probe) {
        const std::size_t j = rng.index(w.size());
        const double w0 = w.data[j];
        w.data[j] = w0 + 1e-5;
        const double up = sc(forward(spec, params, x));
        w.data[j] = w0 - 1e-5;
        const double down = sc(forward(spec, params, x));
        w.data[j] = w0;
        const double fd = (up - down) / 2e-5;
        CHECK(std::abs(g.weights[layer].data[j] - fd) / (1.0 + std::abs(fd)) <= 1e-6);
      }
    }
  }
}

TEST_CASE("gradient bundles") {
  const RefNetSpec spec;
  const auto params = init_params(spec);
  const Scalarizer sc(spec, {1, 1});

  const auto one = synth_calibration(spec, 1, 5);
  const auto g1 = build_gradient_bundle(spec, params, one, sc);
  for (const auto& l : g1.layers) CHECK(l.avg_grad.data == std::vector<double>(l.row(0).begin(), l.row(0).end()));

  CalibrationSet twice = one;
  twice.inputs.shape[0] = 2;
  twice.inputs.data.insert(twice.inputs.data.end(), one.inputs.data.begin(), one.inputs.data.end());
  const auto g2 = build_gradient_bundle(spec, params, twice, sc);
  for (std::size_t i = 0; i < g1.layers.size(); ++i) CHECK(g2.layers[i].avg_grad == g1.layers[i].avg_grad);

  const auto g16 = build_gradient_bundle(spec, params, synth_calibration(spec, 16, 42), sc);
  CHECK_NOTHROW(g16.validate());
  CHECK(g16.n_samples == 16);
  CHECK(g16.layers.size() == spec.layer_count());
  CHECK(g16.layers[0].name == "trunk0.weight");
  CHECK(g16.lambda_used == std::pair{1.0, 1.0});
}

TEST_CASE("true distortion") {
  const RefNetSpec spec;
  const auto dense = init_params(spec);
  const auto calib = synth_calibration(spec, 16, 42);
  const Scalarizer sc(spec, {1, 1});
  CHECK(true_distortion(spec, dense, dense, calib, sc) == 0.0);

  auto pruned = dense;
  const auto order = prune_order(std::vector<double>(dense.weights[0].data.size(), 0.0));
  for (std::size_t j = 0; j < 11; ++j) pruned.weights[0].data[order[j]] = 0.0;
  const double td = true_distortion(spec, dense, pruned, calib, sc);
  CHECK(td > 0.0);
  CHECK(std::isfinite(td));

  double manual = 0.0;
  for (std::size_t n = 0; n < calib.count(); ++n) {
    const double d = sc(forward(spec, dense, calib.sample(n))) - sc(forward(spec, pruned, calib.sample(n)));
    manual += d * d;
  }
  CHECK(td == doctest::Approx(manual / 16.0).epsilon(1e-12));

  RefNetSpec other;
  other.num_classes = 2;
  CHECK_THROWS_AS(true_distortion(other, dense, pruned, calib, sc), Error);
}

TEST_CASE("synthetic calibration") {
  const RefNetSpec spec;
  const auto a = synth_calibration(spec, 16, 42);
  CHECK(a == synth_calibration(spec, 16, 42));
  CHECK(a.inputs.data[0] != synth_calibration(spec, 16, 43).inputs.data[0]);
  CHECK(a.inputs.shape == Shape{16, 3, 16, 16});
  CHECK(golden::matches("calib_n16_seed42.dmb", encode_bundle(a)));
  CHECK_THROWS_AS(synth_calibration(spec, 0, 1), Error);
}

TEST_CASE("bundle export and import") {
  const RefNetSpec spec;
  const auto params = init_params(spec);
  const auto b = to_bundle(spec, params);
  CHECK(is_refnet_bundle(b));
  CHECK(b.prunable_ids() == std::vector<int>{0, 1, 2, 3});
  CHECK(b.layers[0].kind == LayerKind::conv2d);
  CHECK(b.layers[0].flops_per_weight == 512.0);
  CHECK(b.layers[2].kind == LayerKind::dense);
  CHECK(b.layers[2].flops_per_weight == 2.0);
  CHECK(b.layers[4].kind == LayerKind::opaque);
  CHECK_FALSE(b.layers[4].prunable);
  CHECK(spec_from_bundle(b) == spec);
  CHECK(params_from_bundle(b) == params);
  const auto round = std::get<ModelBundle>(decode_bundle(encode_bundle(b)));
  CHECK(params_from_bundle(round) == params);

  ModelBundle foreign = b;
  foreign.meta.erase("refnet_spec");
  CHECK_FALSE(is_refnet_bundle(foreign));
  CHECK_THROWS_AS(spec_from_bundle(foreign), Error);
}

TEST_CASE("finetune limits") {
  const RefNetSpec spec;
  const auto teacher = init_params(spec);
  const auto train = synth_calibration(spec, 16, 7);
  auto pruned = teacher;
  std::vector<Tensor> masks(spec.layer_count());
  masks[1] = Tensor(spec.weight_shape(1), std::vector<double>(shape_size(spec.weight_shape(1)), 1.0));
  for (std::size_t j = 0; j < masks[1].size(); j += 3) {
    masks[1].data[j] = 0.0;
    pruned.weights[1].data[j] = 0.0;
  }

  FinetuneOptions zero{0, 0.05, 8, 1};
  CHECK(finetune(spec, pruned, teacher, masks, train, zero).params == pruned);

  FinetuneOptions tiny{3, 1e-300, 8, 1};
  const auto still = finetune(spec, teacher, teacher, no_masks(spec), train, tiny);
  for (std::size_t i = 0; i < spec.layer_count(); ++i)
    for (std::size_t j = 0; j < teacher.weights[i].size(); ++j)
      CHECK(std::abs(still.params.weights[i].data[j] - teacher.weights[i].data[j]) <= 1e-12);

  FinetuneOptions bad{1, 0.0, 8, 1};
  CHECK_THROWS_AS(finetune(spec, pruned, teacher, masks, train, bad), Error);
}

TEST_CASE("finetune recovers a 30% pruned network") {
  const RefNetSpec spec;
  const auto teacher = init_params(spec);
  const auto calib = synth_calibration(spec, 32, 42);
  const auto train = synth_calibration(spec, 64, 43);
  const Scalarizer sc(spec, {1, 1});

  auto pruned = teacher;
  std::vector<Tensor> masks;
  for (std::size_t i = 0; i < spec.layer_count(); ++i) {
    Tensor m(spec.weight_shape(i), std::vector<double>(shape_size(spec.weight_shape(i)), 1.0));
    const auto order = prune_order(taylor_scores(teacher.weights[i], Tensor(m.shape, m.data)).data);
    for (std::size_t j = 0; j < count_for_ratio(0.3, m.size()); ++j) {
      m.data[order[j]] = 0.0;
      pruned.weights[i].data[order[j]] = 0.0;
    }
    masks.push_back(std::move(m));
  }
  const auto ft = finetune(spec, pruned, teacher, masks, train, {50, 0.05, 8, 3});
  CHECK(true_distortion(spec, teacher, ft.params, calib, sc) < true_distortion(spec, teacher, pruned, calib, sc));
  for (std::size_t e = 1; e < ft.loss_history.size(); ++e) CHECK(ft.loss_history[e] <= ft.loss_history[e - 1]);
  for (std::size_t i = 0; i < masks.size(); ++i)
    for (std::size_t j = 0; j < masks[i].size(); ++j)
      if (masks[i].data[j] == 0.0) CHECK(ft.params.weights[i].data[j] == 0.0);
}
