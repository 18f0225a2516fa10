#include "dmprune/model_ir.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace dmprune {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(std::max<std::int64_t>(d, 0));
  return shape.empty() ? 0 : n;
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(shape_size(shape), 0.0) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {}

void Tensor::validate(const std::string& what) const {
  if (shape.empty()) throw Error(what + ": empty shape");
  for (auto d : shape)
    if (d <= 0) throw Error(what + ": non-positive extent in shape");
  if (data.size() != shape_size(shape)) throw Error(what + ": data length does not match shape");
  for (double v : data)
    if (!std::isfinite(v)) throw Error("non-finite tensor (" + what + ")");
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::opaque: return "opaque";
  }
  return "opaque";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "dense") return LayerKind::dense;
  if (s == "conv2d") return LayerKind::conv2d;
  if (s == "opaque") return LayerKind::opaque;
  throw Error("unknown layer kind '" + s + "'");
}

std::size_t PruneMask::popcount() const {
  return static_cast<std::size_t>(std::count_if(bits.data.begin(), bits.data.end(),
                                                [](double b) { return b != 0.0; }));
}

void PruneMask::validate() const {
  bits.validate("mask");
  for (double b : bits.data)
    if (b != 0.0 && b != 1.0) throw Error("mask bits must be 0 or 1");
  const std::size_t d = bits.size();
  if (order.size() != d) throw Error("mask order is not a permutation of the layer");
  std::vector<char> seen(d, 0);
  for (auto idx : order) {
    if (idx >= d || seen[idx]) throw Error("mask order is not a permutation of the layer");
    seen[idx] = 1;
  }
  const std::size_t pruned = pruned_count();
  for (std::size_t j = 0; j < d; ++j) {
    const bool should_be_zero = j < pruned;
    if ((bits.data[order[j]] == 0.0) != should_be_zero)
      throw Error("mask zeros are not a prefix of its order");
  }
}

PruneMask PruneMask::from_bits(int layer_id, Tensor bits) {
  PruneMask m;
  m.layer_id = layer_id;
  m.order.reserve(bits.size());
  for (std::size_t j = 0; j < bits.size(); ++j)
    if (bits.data[j] == 0.0) m.order.push_back(j);
  for (std::size_t j = 0; j < bits.size(); ++j)
    if (bits.data[j] != 0.0) m.order.push_back(j);
  m.bits = std::move(bits);
  return m;
}

void ModelBundle::validate() const {
  if (layers.empty()) throw Error("no prunable layers");
  std::set<std::string> names;
  bool any_prunable = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.layer_id != static_cast<int>(i))
      throw Error("layer ids must be contiguous and increasing from 0");
    if (!names.insert(l.name).second) throw Error("duplicate layer name '" + l.name + "'");
    if (!(l.flops_per_weight >= 0.0) || !std::isfinite(l.flops_per_weight))
      throw Error("layer '" + l.name + "': flops_per_weight must be finite and >= 0");
    l.weight.validate("layer '" + l.name + "' weight");
    any_prunable = any_prunable || l.prunable;
  }
  if (!any_prunable) throw Error("no prunable layers");
  std::set<int> masked;
  for (const auto& m : masks) {
    const auto* l = find_layer(m.layer_id);
    if (!l || !l->prunable) throw Error("mask for unknown or non-prunable layer");
    if (!masked.insert(m.layer_id).second) throw Error("duplicate mask for a layer");
    if (m.bits.shape != l->weight.shape) throw Error("mask shape does not match weight shape");
    m.validate();
  }
}

const LayerRecord* ModelBundle::find_layer(int layer_id) const {
  if (layer_id < 0 || layer_id >= static_cast<int>(layers.size())) return nullptr;
  return &layers[static_cast<std::size_t>(layer_id)];
}

const LayerRecord& ModelBundle::layer(int layer_id) const {
  const auto* l = find_layer(layer_id);
  if (!l) throw Error("unknown layer id " + std::to_string(layer_id));
  return *l;
}

std::vector<int> ModelBundle::prunable_ids() const {
  std::vector<int> ids;
  for (const auto& l : layers)
    if (l.prunable) ids.push_back(l.layer_id);
  return ids;
}

std::span<const double> LayerGradient::row(std::size_t n) const {
  const auto d = avg_grad.size();
  return std::span<const double>(per_sample->data).subspan(n * d, d);
}

void GradientBundle::validate() const {
  if (layers.empty()) throw Error("gradient bundle has no layers");
  if (n_samples < 1) throw Error("gradient bundle needs n_samples >= 1");
  if (!(lambda_used.first >= 0.0) || !(lambda_used.second >= 0.0))
    throw Error("lambda weights must be nonnegative");
  std::set<int> ids;
  int prev = -1;
  for (const auto& g : layers) {
    if (g.layer_id <= prev) throw Error("gradient layer ids must be strictly increasing");
    prev = g.layer_id;
    ids.insert(g.layer_id);
    g.avg_grad.validate("avg_grad of layer " + std::to_string(g.layer_id));
    if (!g.per_sample) continue;
    const auto& ps = *g.per_sample;
    ps.validate("per_sample_grads of layer " + std::to_string(g.layer_id));
    const std::size_t d = g.avg_grad.size();
    if (ps.shape.size() != 2 || static_cast<std::size_t>(ps.shape[1]) != d)
      throw Error("per_sample_grads must be an N x D matrix");
    const auto n = static_cast<std::size_t>(ps.shape[0]);
    if (n != static_cast<std::size_t>(n_samples))
      throw Error("per_sample_grads row count differs from n_samples");
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += ps.data[r * d + j];
      const double mean = s / static_cast<double>(n);
      const double ref = g.avg_grad.data[j];
      if (std::abs(mean - ref) > 1e-10 * std::max(1.0, std::abs(ref)))
        throw Error("per_sample_grads row mean differs from avg_grad");
    }
  }
}

const LayerGradient* GradientBundle::find(int layer_id) const {
  for (const auto& g : layers)
    if (g.layer_id == layer_id) return &g;
  return nullptr;
}

std::span<const double> CalibrationSet::sample(std::size_t n) const {
  const auto s = sample_size();
  return std::span<const double>(inputs.data).subspan(n * s, s);
}

void CalibrationSet::validate() const {
  inputs.validate("calibration inputs");
  if (inputs.shape.size() < 2) throw Error("calibration inputs must be [N, ...]");
}

double flops_of(const ModelBundle& bundle, std::span<const PruneMask> masks) {
  for (const auto& m : masks) {
    const auto& l = bundle.layer(m.layer_id);
    if (m.bits.shape != l.weight.shape) throw Error("mask shape does not match weight shape");
  }
  double total = 0.0;
  for (const auto& l : bundle.layers) {
    if (!l.prunable) continue;
    double nnz = static_cast<double>(l.size());
    for (const auto& m : masks)
      if (m.layer_id == l.layer_id) nnz = static_cast<double>(m.popcount());
    total += l.flops_per_weight * nnz;
  }
  return total;
}

}  // namespace dmprune
