#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "dmprune/dmb.hpp"
#include "dmprune/model_ir.hpp"
#include "dmprune/rng.hpp"

using namespace dmprune;

namespace {

LayerRecord layer(int id, std::string name, Shape shape, double c, bool prunable = true) {
  LayerRecord l;
  l.layer_id = id;
  l.name = std::move(name);
  l.kind = prunable ? LayerKind::dense : LayerKind::opaque;
  l.weight = Tensor(std::move(shape));
  for (std::size_t j = 0; j < l.weight.size(); ++j) l.weight.data[j] = 0.25 * static_cast<double>(j) - 1.0;
  l.flops_per_weight = c;
  l.prunable = prunable;
  return l;
}

ModelBundle two_layer_bundle() {
  ModelBundle b;
  b.layers.push_back(layer(0, "a", {10}, 4.0));
  b.layers.push_back(layer(1, "b", {4, 5}, 2.0));
  b.meta["model"] = "toy";
  return b;
}

PruneMask mask_with_zeros(const LayerRecord& l, std::size_t zeros) {
  Tensor bits(l.weight.shape, std::vector<double>(l.size(), 1.0));
  for (std::size_t j = 0; j < zeros; ++j) bits.data[j] = 0.0;
  return PruneMask::from_bits(l.layer_id, bits);
}

std::filesystem::path tmp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "dmprune_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("flops_of counts c_i * nnz_i over prunable layers") {
  auto b = two_layer_bundle();
  CHECK(flops_of(b) == doctest::Approx(80.0));

  const auto m = mask_with_zeros(b.layers[0], 5);
  CHECK(flops_of(b, std::span(&m, 1)) == doctest::Approx(60.0));

  std::vector<PruneMask> half{mask_with_zeros(b.layers[0], 5), mask_with_zeros(b.layers[1], 10)};
  CHECK(flops_of(b, half) / flops_of(b) == doctest::Approx(0.5));

  // all-ones masks behave like no masks
  std::vector<PruneMask> ones{mask_with_zeros(b.layers[0], 0), mask_with_zeros(b.layers[1], 0)};
  CHECK(flops_of(b, ones) == flops_of(b));

  // non-prunable layers are excluded
  b.layers.push_back(layer(2, "bias", {3}, 100.0, false));
  CHECK(flops_of(b) == doctest::Approx(80.0));
}

TEST_CASE("flops_of is monotone nonincreasing in the pruned count") {
  const auto b = two_layer_bundle();
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t z = 0; z <= 10; ++z) {
    const auto m = mask_with_zeros(b.layers[0], z);
    const double f = flops_of(b, std::span(&m, 1));
    CHECK(f <= prev);
    prev = f;
  }
}

TEST_CASE("flops_of rejects masks of the wrong shape") {
  const auto b = two_layer_bundle();
  PruneMask m = PruneMask::from_bits(0, Tensor({3}, {1, 1, 1}));
  CHECK_THROWS_AS(flops_of(b, std::span(&m, 1)), Error);
}

TEST_CASE("DMB round trip is bit exact") {
  ModelBundle b;
  b.layers.push_back(layer(0, "only", {2, 2}, 2.0));
  b.layers[0].weight.data = {1.0, -0.0, 3.141592653589793, 1e-310};
  const auto bytes = encode_bundle(b);
  // magic + length + manifest + one 32-byte blob
  CHECK(bytes.substr(0, 4) == "DMB1");
  auto decoded = std::get<ModelBundle>(decode_bundle(bytes));
  CHECK(decoded == b);
  CHECK(std::signbit(decoded.layers[0].weight.data[1]));

  const auto path = tmp_file("roundtrip.dmb");
  save_bundle(b, path);
  CHECK(load_model(path) == b);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  CHECK(bytes.size() == 12 + len + 32);
}

TEST_CASE("DMB round trip property over random bundles") {
  Rng rng(2024);
  for (int trial = 0; trial < 25; ++trial) {
    ModelBundle b;
    const int layers = 1 + static_cast<int>(rng.index(4));
    for (int i = 0; i < layers; ++i) {
      Shape shape;
      const int rank = 1 + static_cast<int>(rng.index(3));
      for (int r = 0; r < rank; ++r) shape.push_back(1 + static_cast<std::int64_t>(rng.index(5)));
      auto l = layer(i, "layer" + std::to_string(i), shape, rng.uniform(0.0, 10.0), i == 0 || rng.uniform() < 0.7);
      for (double& w : l.weight.data) w = rng.normal();
      b.layers.push_back(std::move(l));
    }
    if (rng.uniform() < 0.5) {
      const auto& l0 = b.layers[0];
      Tensor bits(l0.weight.shape, std::vector<double>(l0.size(), 1.0));
      for (double& x : bits.data) x = rng.uniform() < 0.3 ? 0.0 : 1.0;
      b.masks.push_back(PruneMask::from_bits(0, bits));
    }
    CHECK(std::get<ModelBundle>(decode_bundle(encode_bundle(b))) == b);

    GradientBundle g;
    const std::size_t n = 1 + rng.index(4);
    g.n_samples = static_cast<int>(n);
    g.lambda_used = {rng.uniform(), rng.uniform()};
    for (const auto& l : b.layers) {
      if (!l.prunable) continue;
      LayerGradient lg;
      lg.layer_id = l.layer_id;
      lg.name = l.name;
      lg.per_sample = Tensor({static_cast<std::int64_t>(n), static_cast<std::int64_t>(l.size())});
      for (double& x : lg.per_sample->data) x = rng.normal();
      lg.avg_grad = Tensor(l.weight.shape);
      for (std::size_t j = 0; j < l.size(); ++j) {
        double s = 0.0;
        for (std::size_t r = 0; r < n; ++r) s += lg.per_sample->data[r * l.size() + j];
        lg.avg_grad.data[j] = s / static_cast<double>(n);
      }
      g.layers.push_back(std::move(lg));
    }
    CHECK(std::get<GradientBundle>(decode_bundle(encode_bundle(g))) == g);
  }
}

TEST_CASE("invariant violations are rejected before writing") {
  ModelBundle b = two_layer_bundle();
  b.layers[1].weight.data[3] = std::nan("");
  CHECK_THROWS_WITH_AS(encode_bundle(b), doctest::Contains("non-finite tensor"), Error);

  ModelBundle empty;
  CHECK_THROWS_WITH_AS(encode_bundle(empty), "no prunable layers", Error);

  ModelBundle opaque_only;
  opaque_only.layers.push_back(layer(0, "x", {2}, 1.0, false));
  CHECK_THROWS_WITH_AS(encode_bundle(opaque_only), "no prunable layers", Error);

  ModelBundle dup = two_layer_bundle();
  dup.layers[1].name = "a";
  CHECK_THROWS_AS(encode_bundle(dup), Error);

  ModelBundle neg = two_layer_bundle();
  neg.layers[0].flops_per_weight = -1.0;
  CHECK_THROWS_AS(encode_bundle(neg), Error);
}

TEST_CASE("malformed DMB files are rejected") {
  const auto bytes = encode_bundle(two_layer_bundle());
  CHECK_THROWS_WITH_AS(decode_bundle(bytes.substr(0, bytes.size() - 5)), doctest::Contains("tensor byte-length mismatch"),
                       Error);
  std::string wrong = bytes;
  wrong[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_bundle(wrong), "not a DMB file", Error);
  CHECK_THROWS_WITH_AS(decode_bundle("DM"), "not a DMB file", Error);

  std::string bad_version = bytes;
  const auto pos = bad_version.find("\"version\":1");
  REQUIRE(pos != std::string::npos);
  bad_version[pos + 10] = '7';
  CHECK_THROWS_WITH_AS(decode_bundle(bad_version), doctest::Contains("version unsupported"), Error);

  std::string bad_json = bytes;
  bad_json[12] = '[';
  CHECK_THROWS_WITH_AS(decode_bundle(bad_json), doctest::Contains("malformed manifest"), Error);
}

TEST_CASE("gradient bundles enforce row-mean consistency") {
  GradientBundle g;
  g.n_samples = 2;
  LayerGradient lg;
  lg.layer_id = 0;
  lg.name = "a";
  lg.avg_grad = Tensor({2}, {1.0, 2.0});
  lg.per_sample = Tensor({2, 2}, {0.0, 2.0, 2.0, 2.0});
  g.layers.push_back(lg);
  CHECK_NOTHROW(g.validate());
  g.layers[0].avg_grad.data[1] = 2.5;
  CHECK_THROWS_WITH_AS(g.validate(), doctest::Contains("row mean"), Error);
}

TEST_CASE("mask invariants") {
  Tensor bits({3}, {1, 0, 1});
  PruneMask m;
  m.layer_id = 0;
  m.bits = bits;
  m.order = {1, 0, 2};
  CHECK_NOTHROW(m.validate());
  CHECK(m.pruned_count() == 1);
  m.order = {0, 1, 2};
  CHECK_THROWS_AS(m.validate(), Error);
  m.order = {1, 1, 2};
  CHECK_THROWS_AS(m.validate(), Error);
}
