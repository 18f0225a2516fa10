#pragma once

// Miniature two-headed detection-style network with a hand-written backward
// pass. It is the only model the engine can execute, and it serves as the
// ground truth for everything the second-order machinery predicts.
//
//   x -> [conv3x3 same, relu] x T -> avgpool(p) -> flatten -> f
//   box head:  p_b = W_b f + b_b                 (N_s * S outputs)
//   conf head: p_c = sigmoid(W_c f + b_c)        (N_s * C outputs)

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmprune/model_ir.hpp"

namespace dmprune {

struct ConvShape {
  int out_ch = 0;
  int in_ch = 0;
  int kh = 3;
  int kw = 3;
  friend bool operator==(const ConvShape&, const ConvShape&) = default;
};

enum class Activation { relu, identity };

struct RefNetSpec {
  int in_channels = 3;
  int height = 16;
  int width = 16;
  std::vector<ConvShape> trunk{{8, 3, 3, 3}, {8, 8, 3, 3}};
  int pool = 4;
  int num_boxes = 4;
  int box_dims = 7;
  int num_classes = 3;
  Activation activation = Activation::relu;
  std::uint64_t seed = 42;

  void validate() const;
  std::size_t input_size() const;
  std::size_t feature_size() const;
  std::size_t box_outputs() const { return static_cast<std::size_t>(num_boxes * box_dims); }
  std::size_t conf_outputs() const { return static_cast<std::size_t>(num_boxes * num_classes); }
  // trunk layers followed by the box head and the confidence head
  std::size_t layer_count() const { return trunk.size() + 2; }
  Shape weight_shape(std::size_t layer) const;
  std::string layer_name(std::size_t layer) const;

  std::string to_json() const;
  static RefNetSpec from_json(const std::string& text);

  friend bool operator==(const RefNetSpec&, const RefNetSpec&) = default;
};

struct RefNetParams {
  std::vector<Tensor> weights;  // one per layer, RefNetSpec::layer_count()
  std::vector<Tensor> biases;

  friend bool operator==(const RefNetParams&, const RefNetParams&) = default;
};

struct RefNetOutput {
  std::vector<double> boxes;  // N_s x S, row-major
  std::vector<double> conf;   // N_s x C, post-sigmoid
};

// He-normal trunk, LeCun-normal heads, small normal biases; seeded by spec.seed.
RefNetParams init_params(const RefNetSpec& spec);
RefNetParams zero_params(const RefNetSpec& spec);

RefNetOutput forward(const RefNetSpec& spec, const RefNetParams& params, std::span<const double> x);

// Gradients of sum(d_boxes . p_b) + sum(d_conf . p_c) for every parameter.
RefNetParams backward(const RefNetSpec& spec, const RefNetParams& params, std::span<const double> x,
                      std::span<const double> d_boxes, std::span<const double> d_conf);

// Smallest |pre-activation| over all trunk units; used to keep
// finite-difference probes away from relu kinks.
double min_abs_preactivation(const RefNetSpec& spec, const RefNetParams& params, std::span<const double> x);

struct LambdaWeights {
  double box = 1.0;
  double conf = 1.0;
  void validate() const;
};

// Linear reduction u = w_b . p_b + w_c . p_c of the two heads to a scalar.
// The default uses w_b = lambda_b, w_c = lambda_c everywhere; the probe
// variant draws fixed Gaussian weights scaled by the same lambdas.
class Scalarizer {
 public:
  Scalarizer(const RefNetSpec& spec, LambdaWeights lambda);
  static Scalarizer random_probe(const RefNetSpec& spec, LambdaWeights lambda, std::uint64_t seed);

  double operator()(const RefNetOutput& out) const;
  std::span<const double> box_weights() const { return box_; }
  std::span<const double> conf_weights() const { return conf_; }
  const LambdaWeights& lambda() const { return lambda_; }

 private:
  LambdaWeights lambda_;
  std::vector<double> box_;
  std::vector<double> conf_;
};

double scalarize(const RefNetOutput& out, const LambdaWeights& lambda);

RefNetParams backward_scalarized(const RefNetSpec& spec, const RefNetParams& params,
                                 std::span<const double> x, const Scalarizer& scalarizer);

// Standard-normal inputs of the spec's input shape.
CalibrationSet synth_calibration(const RefNetSpec& spec, std::size_t count, std::uint64_t seed);

// Per-sample and averaged weight gradients of the scalarized output. Layer
// ids follow to_bundle(): weight layer i has id i.
GradientBundle build_gradient_bundle(const RefNetSpec& spec, const RefNetParams& params,
                                     const CalibrationSet& calib, const Scalarizer& scalarizer);

// (1/N) sum_n (u(dense, x_n) - u(pruned, x_n))^2.
double true_distortion(const RefNetSpec& spec, const RefNetParams& dense, const RefNetParams& pruned,
                       const CalibrationSet& calib, const Scalarizer& scalarizer);

// Export: weights get ids 0..L-1 (prunable), biases L..2L-1 (opaque, not
// prunable). The spec travels in meta["refnet_spec"].
ModelBundle to_bundle(const RefNetSpec& spec, const RefNetParams& params);
bool is_refnet_bundle(const ModelBundle& bundle);
RefNetSpec spec_from_bundle(const ModelBundle& bundle);
RefNetParams params_from_bundle(const ModelBundle& bundle);

struct FinetuneOptions {
  std::size_t epochs = 50;
  double step_size = 0.05;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  RefNetParams params;
  std::vector<double> loss_history;  // training loss before epoch 1, then after each epoch
  std::size_t epochs_run = 0;
  bool early_stopped = false;
};

// Self-distillation toward the dense model's outputs by minibatch gradient
// descent on 1/2 ||y_dense - y||^2. Masked weights are reset to zero after
// every step. An epoch that raises the training loss is rolled back and the
// step size halved; a loss above 10x the initial value aborts.
// masks[i] holds the keep-bits of weight layer i (empty tensor: unmasked).
FinetuneResult finetune(const RefNetSpec& spec, const RefNetParams& pruned, const RefNetParams& teacher,
                        std::span<const Tensor> masks, const CalibrationSet& train,
                        const FinetuneOptions& options);

}  // namespace dmprune
