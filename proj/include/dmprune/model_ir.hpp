#pragma once

// Framework-neutral model, gradient, mask and calibration records.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmprune/error.hpp"

namespace dmprune {

using Shape = std::vector<std::int64_t>;

std::size_t shape_size(const Shape& shape);

// Dense row-major tensor of 64-bit reals.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::span<const double> view() const { return data; }
  std::span<double> view() { return data; }

  // Throws Error unless data.size() == product(shape), every extent is
  // positive and every value is finite.
  void validate(const std::string& what = "tensor") const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

enum class LayerKind { dense, conv2d, opaque };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

struct LayerRecord {
  int layer_id = 0;
  std::string name;
  LayerKind kind = LayerKind::dense;
  Tensor weight;
  double flops_per_weight = 0.0;
  bool prunable = true;

  std::size_t size() const { return weight.size(); }

  friend bool operator==(const LayerRecord&, const LayerRecord&) = default;
};

// Binary keep-mask for one layer. `order` lists flat indices in pruning
// order; the zeros of `bits` are exactly order[0, pruned_count()).
struct PruneMask {
  int layer_id = 0;
  Tensor bits;
  std::vector<std::size_t> order;

  std::size_t popcount() const;
  std::size_t pruned_count() const { return bits.size() - popcount(); }
  void validate() const;

  // Rebuilds a mask from bits alone; the order puts zero positions first,
  // each group ascending by index.
  static PruneMask from_bits(int layer_id, Tensor bits);

  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

struct ModelBundle {
  std::vector<LayerRecord> layers;
  std::map<std::string, std::string> meta;
  // Present on pruned bundles only.
  std::vector<PruneMask> masks;

  void validate() const;
  const LayerRecord& layer(int layer_id) const;
  const LayerRecord* find_layer(int layer_id) const;
  std::vector<int> prunable_ids() const;

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

struct LayerGradient {
  int layer_id = 0;
  std::string name;
  Tensor avg_grad;
  // N x D matrix of flattened per-sample gradients, shape [N, D].
  std::optional<Tensor> per_sample;

  std::size_t n_rows() const {
    return per_sample ? static_cast<std::size_t>(per_sample->shape[0]) : 0;
  }
  std::span<const double> row(std::size_t n) const;

  friend bool operator==(const LayerGradient&, const LayerGradient&) = default;
};

struct GradientBundle {
  std::vector<LayerGradient> layers;
  std::pair<double, double> lambda_used{1.0, 1.0};
  int n_samples = 1;
  std::map<std::string, std::string> meta;

  void validate() const;
  const LayerGradient* find(int layer_id) const;

  friend bool operator==(const GradientBundle&, const GradientBundle&) = default;
};

// Unlabeled inputs stacked as one [N, C, H, W] tensor.
struct CalibrationSet {
  Tensor inputs;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> meta;

  std::size_t count() const {
    return inputs.shape.empty() ? 0 : static_cast<std::size_t>(inputs.shape[0]);
  }
  std::size_t sample_size() const { return count() == 0 ? 0 : inputs.size() / count(); }
  std::span<const double> sample(std::size_t n) const;
  void validate() const;

  friend bool operator==(const CalibrationSet&, const CalibrationSet&) = default;
};

// Sum of c_i * nnz_i over prunable layers. A layer without a mask counts all
// of its weights.
double flops_of(const ModelBundle& bundle, std::span<const PruneMask> masks = {});

}  // namespace dmprune
