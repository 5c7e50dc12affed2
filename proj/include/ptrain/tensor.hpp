#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ptrain {

// Dense 4-D single-precision tensor, row-major (n, c, h, w).
struct Tensor {
  int n = 1, c = 1, h = 1, w = 1;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_);

  static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }

  std::size_t size() const { return data.size(); }

  std::size_t index(int in, int ic, int ih, int iw) const {
    return ((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw;
  }
  float& at(int in, int ic, int ih, int iw) { return data[index(in, ic, ih, iw)]; }
  const float& at(int in, int ic, int ih, int iw) const { return data[index(in, ic, ih, iw)]; }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  std::string shape_str() const;
};

struct ConvSpec {
  int out_channels = 1;
  int kh = 1, kw = 1;
  int stride = 1;
  int pad = 0;
};

struct PoolSpec {
  int ph = 2, pw = 2;
  int stride = 2;
};

// Output spatial extent for a conv/pool dimension. Throws std::invalid_argument
// unless (extent + 2*pad - k) divides stride exactly with a positive result.
int out_extent(int extent, int k, int stride, int pad, const char* what);

Tensor conv2d_forward(const Tensor& input, const Tensor& weights,
                      std::span<const float> bias, const ConvSpec& spec);

struct ConvGrads {
  Tensor input;
  Tensor weights;
  std::vector<float> bias;
};
ConvGrads conv2d_backward(const Tensor& input, const Tensor& weights,
                          const Tensor& grad_out, const ConvSpec& spec);

struct PoolResult {
  Tensor output;
  // Flat index into the input tensor of the chosen maximum, one per output
  // element, first occurrence in row-major scan order on ties.
  std::vector<std::int64_t> argmax;
};
PoolResult maxpool_forward(const Tensor& input, const PoolSpec& spec);

Tensor maxpool_backward(const Tensor& grad_out, std::span<const std::int64_t> argmax,
                        int in_n, int in_c, int in_h, int in_w);

// input is treated as (n, d) with d = c*h*w; weights are (m, d) stored as a
// Tensor of shape (m, d, 1, 1); output is (n, m, 1, 1).
Tensor dense_forward(const Tensor& input, const Tensor& weights,
                     std::span<const float> bias);

struct DenseGrads {
  Tensor input;
  Tensor weights;
  std::vector<float> bias;
};
DenseGrads dense_backward(const Tensor& input, const Tensor& weights,
                          const Tensor& grad_out);

Tensor relu(const Tensor& input);
// Passes grad where input > 0, zero where input <= 0.
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

struct SoftmaxResult {
  float loss = 0.0f;     // mean over rows of -log prob[label]
  Tensor probs;          // (n, k, 1, 1), rows sum to 1
  Tensor grad_logits;    // (probs - onehot) / n
};
SoftmaxResult softmax_xent(const Tensor& logits, std::span<const int> labels);

// Central finite differences of a scalar function, elementwise.
Tensor finite_diff_grad(const std::function<float(const Tensor&)>& f,
                        const Tensor& x, float eps);

}  // namespace ptrain
