#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ptrain/tensor.hpp"

namespace ptrain {

enum class LayerKind { Conv, MaxPool, Dense, ReLU, Flatten, SoftmaxXent };

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  ConvSpec conv;      // Conv
  PoolSpec pool;      // MaxPool
  int dense_out = 0;  // Dense
  int classes = 0;    // SoftmaxXent

  static LayerSpec make_conv(int out_channels, int kh, int kw, int stride, int pad);
  static LayerSpec make_pool(int ph, int pw, int stride);
  static LayerSpec make_dense(int out_dim);
  static LayerSpec make_relu();
  static LayerSpec make_flatten();
  static LayerSpec make_softmax(int classes);
};

struct Shape3 {
  int c = 1, h = 1, w = 1;
};

// Ordered layer list; shape-chaining is validated at construction.
struct NetworkSpec {
  Shape3 input;
  std::vector<LayerSpec> layers;

  NetworkSpec(Shape3 input_shape, std::vector<LayerSpec> layer_list);

  // Shape entering each layer; shapes[layers.size()] is the logits shape.
  const std::vector<Shape3>& shapes() const { return shapes_; }
  int classes() const { return classes_; }
  // Total parameter-and-momentum float count across parameterized layers.
  std::size_t state_float_count() const;

 private:
  std::vector<Shape3> shapes_;
  int classes_ = 0;
};

struct LayerParams {
  Tensor weights;            // conv: (o,c,kh,kw); dense: (m,d,1,1)
  std::vector<float> bias;
  Tensor w_mom;
  std::vector<float> b_mom;
};

// Weights, biases and momentum for every parameterized layer of one replica.
struct ParamState {
  std::vector<LayerParams> layers;
};

struct LayerGrads {
  Tensor weights;
  std::vector<float> bias;
};
struct ParamGrads {
  std::vector<LayerGrads> layers;
};

struct Hyper {
  float learning_rate = 0.01f;
  float momentum = 0.9f;
};

// 5 conv (pool after conv 1, 2, 5), 2 dense, 1 softmax. Base channel widths
// (32, 64, 96, 96, 64) and hidden width 256 are multiplied by width_scale.
NetworkSpec build_alexnet_scaled(Shape3 input, int classes, float width_scale);

// Gaussian weights (0.01 std on the first and last parameterized layers,
// fan-in scaled elsewhere), zero biases and momentum; bit-reproducible in seed.
ParamState init_params(const NetworkSpec& spec, std::uint64_t seed);

struct StepResult {
  float loss = 0.0f;
  float accuracy = 0.0f;
  ParamGrads grads;
};
StepResult forward_backward(const NetworkSpec& spec, const ParamState& params,
                            const Tensor& images, std::span<const int> labels);

// Forward pass only: per-row class logits (n, classes, 1, 1).
Tensor forward_logits(const NetworkSpec& spec, const ParamState& params,
                      const Tensor& images);

struct TopKErrors {
  double top1 = 0.0;  // fraction of rows whose argmax is not the label
  double top5 = 0.0;  // fraction of rows whose label is outside the 5 best
};
TopKErrors top_errors(const Tensor& logits, std::span<const int> labels);

// v <- mu*v - eta*g; p <- p + v, in place.
void sgd_momentum_step(ParamState& params, const ParamGrads& grads, const Hyper& hyper);

// "PPS1" wire layout: magic | version u32 | layer count u32 | per layer
// weights, bias, weight-momentum, bias-momentum as little-endian f32.
std::vector<std::uint8_t> flatten_state(const ParamState& params);
ParamState unflatten_state(std::span<const std::uint8_t> buffer, const NetworkSpec& spec);

}  // namespace ptrain
