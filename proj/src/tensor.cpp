#include "ptrain/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace ptrain {

namespace {

[[noreturn]] void shape_fail(const std::string& msg) {
  throw std::invalid_argument("shape error: " + msg);
}

}  // namespace

Tensor::Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
  if (n < 1 || c < 1 || h < 1 || w < 1) shape_fail("all extents must be >= 1, got " + shape_str());
  data.assign(static_cast<std::size_t>(n) * c * h * w, 0.0f);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

int out_extent(int extent, int k, int stride, int pad, const char* what) {
  const int span = extent + 2 * pad - k;
  if (span < 0 || span % stride != 0)
    shape_fail(std::string(what) + ": extent " + std::to_string(extent) + " with kernel " +
               std::to_string(k) + ", stride " + std::to_string(stride) + ", pad " +
               std::to_string(pad) + " does not divide exactly");
  return span / stride + 1;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weights,
                      std::span<const float> bias, const ConvSpec& spec) {
  if (weights.n != spec.out_channels || weights.h != spec.kh || weights.w != spec.kw)
    shape_fail("conv weights " + weights.shape_str() + " do not match spec");
  if (weights.c != input.c)
    shape_fail("conv input has " + std::to_string(input.c) + " channels, weights expect " +
               std::to_string(weights.c));
  if (static_cast<int>(bias.size()) != spec.out_channels)
    shape_fail("conv bias length " + std::to_string(bias.size()) + " != out_channels");
  const int oh = out_extent(input.h, spec.kh, spec.stride, spec.pad, "conv height");
  const int ow = out_extent(input.w, spec.kw, spec.stride, spec.pad, "conv width");

  Tensor out(input.n, spec.out_channels, oh, ow);
  const int s = spec.stride, pad = spec.pad;
  for (int in = 0; in < input.n; ++in) {
    for (int o = 0; o < spec.out_channels; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        float* orow = &out.at(in, o, oy, 0);
        for (int ox = 0; ox < ow; ++ox) orow[ox] = bias[o];
        for (int ic = 0; ic < input.c; ++ic) {
          for (int ky = 0; ky < spec.kh; ++ky) {
            const int iy = oy * s + ky - pad;
            if (iy < 0 || iy >= input.h) continue;
            const float* irow = &input.at(in, ic, iy, 0);
            const float* wrow = &weights.at(o, ic, ky, 0);
            for (int kx = 0; kx < spec.kw; ++kx) {
              const float wv = wrow[kx];
              // valid ox range so that ix = ox*s + kx - pad lies in [0, w)
              int lo = 0;
              if (kx - pad < 0) lo = (pad - kx + s - 1) / s;
              int hi = ow - 1;
              const int max_num = input.w - 1 - kx + pad;
              if (max_num < 0) continue;
              hi = std::min(hi, max_num / s);
              const float* ip = irow + (static_cast<std::ptrdiff_t>(lo) * s + kx - pad);
              if (s == 1) {  // contiguous: let the compiler vectorize
                const float* __restrict__ ipr = ip;
                float* __restrict__ opr = orow + lo;
                const int count = hi - lo + 1;
                for (int ox = 0; ox < count; ++ox) opr[ox] += wv * ipr[ox];
              } else {
                for (int ox = lo; ox <= hi; ++ox, ip += s) orow[ox] += wv * *ip;
              }
            }
          }
        }
      }
    }
  }
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& weights,
                          const Tensor& grad_out, const ConvSpec& spec) {
  const int oh = out_extent(input.h, spec.kh, spec.stride, spec.pad, "conv height");
  const int ow = out_extent(input.w, spec.kw, spec.stride, spec.pad, "conv width");
  if (weights.n != spec.out_channels || weights.c != input.c)
    shape_fail("conv weights " + weights.shape_str() + " inconsistent with input");
  if (grad_out.n != input.n || grad_out.c != spec.out_channels || grad_out.h != oh ||
      grad_out.w != ow)
    shape_fail("conv grad_out " + grad_out.shape_str() + " does not match forward output");

  ConvGrads g;
  g.input = Tensor::zeros(input.n, input.c, input.h, input.w);
  g.weights = Tensor::zeros(weights.n, weights.c, weights.h, weights.w);
  g.bias.assign(spec.out_channels, 0.0f);

  const int s = spec.stride, pad = spec.pad;
  for (int in = 0; in < input.n; ++in) {
    for (int o = 0; o < spec.out_channels; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        const float* gorow = &grad_out.at(in, o, oy, 0);
        float acc = 0.0f;
        for (int ox = 0; ox < ow; ++ox) acc += gorow[ox];
        g.bias[o] += acc;
        for (int ic = 0; ic < input.c; ++ic) {
          for (int ky = 0; ky < spec.kh; ++ky) {
            const int iy = oy * s + ky - pad;
            if (iy < 0 || iy >= input.h) continue;
            const float* irow = &input.at(in, ic, iy, 0);
            float* girow = &g.input.at(in, ic, iy, 0);
            float* gwrow = &g.weights.at(o, ic, ky, 0);
            const float* wrow = &weights.at(o, ic, ky, 0);
            for (int kx = 0; kx < spec.kw; ++kx) {
              int lo = 0;
              if (kx - pad < 0) lo = (pad - kx + s - 1) / s;
              const int max_num = input.w - 1 - kx + pad;
              if (max_num < 0) continue;
              const int hi = std::min(ow - 1, max_num / s);
              const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(lo) * s + kx - pad;
              const float* ip = irow + off;
              float* gip = girow + off;
              const float wv = wrow[kx];
              float gw = 0.0f;
              if (s == 1) {
                const float* __restrict__ ipr = ip;
                float* __restrict__ gipr = gip;
                const float* __restrict__ gor = gorow + lo;
                const int count = hi - lo + 1;
                for (int ox = 0; ox < count; ++ox) {
                  gw += gor[ox] * ipr[ox];
                  gipr[ox] += wv * gor[ox];
                }
              } else {
                for (int ox = lo; ox <= hi; ++ox, ip += s, gip += s) {
                  const float go = gorow[ox];
                  gw += go * *ip;
                  *gip += wv * go;
                }
              }
              gwrow[kx] += gw;
            }
          }
        }
      }
    }
  }
  return g;
}

PoolResult maxpool_forward(const Tensor& input, const PoolSpec& spec) {
  const int oh = out_extent(input.h, spec.ph, spec.stride, 0, "pool height");
  const int ow = out_extent(input.w, spec.pw, spec.stride, 0, "pool width");
  PoolResult r;
  r.output = Tensor(input.n, input.c, oh, ow);
  r.argmax.assign(r.output.size(), 0);
  std::size_t oi = 0;
  for (int in = 0; in < input.n; ++in) {
    for (int ic = 0; ic < input.c; ++ic) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++oi) {
          float best = -std::numeric_limits<float>::infinity();
          std::int64_t best_idx = -1;
          for (int ky = 0; ky < spec.ph; ++ky) {
            const int iy = oy * spec.stride + ky;
            for (int kx = 0; kx < spec.pw; ++kx) {
              const int ix = ox * spec.stride + kx;
              const std::size_t idx = input.index(in, ic, iy, ix);
              const float v = input.data[idx];
              if (v > best) {  // strict: first occurrence wins ties
                best = v;
                best_idx = static_cast<std::int64_t>(idx);
              }
            }
          }
          r.output.data[oi] = best;
          r.argmax[oi] = best_idx;
        }
      }
    }
  }
  return r;
}

Tensor maxpool_backward(const Tensor& grad_out, std::span<const std::int64_t> argmax,
                        int in_n, int in_c, int in_h, int in_w) {
  if (argmax.size() != grad_out.size())
    shape_fail("maxpool argmax length " + std::to_string(argmax.size()) +
               " != grad_out size " + std::to_string(grad_out.size()));
  Tensor g(in_n, in_c, in_h, in_w);
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    const std::int64_t idx = argmax[i];
    if (idx < 0 || idx >= static_cast<std::int64_t>(g.size()))
      shape_fail("maxpool argmax out of range for input shape " + g.shape_str());
    g.data[static_cast<std::size_t>(idx)] += grad_out.data[i];
  }
  return g;
}

Tensor dense_forward(const Tensor& input, const Tensor& weights,
                     std::span<const float> bias) {
  const int d = input.c * input.h * input.w;
  const int m = weights.n;
  if (weights.c * weights.h * weights.w != d)
    shape_fail("dense input dim " + std::to_string(d) + " != weight dim " +
               std::to_string(weights.c * weights.h * weights.w));
  if (static_cast<int>(bias.size()) != m)
    shape_fail("dense bias length " + std::to_string(bias.size()) + " != out dim");
  Tensor out(input.n, m, 1, 1);
  for (int i = 0; i < input.n; ++i) {
    const float* row = &input.data[static_cast<std::size_t>(i) * d];
    for (int j = 0; j < m; ++j) {
      const float* wrow = &weights.data[static_cast<std::size_t>(j) * d];
      float acc = bias[j];
      for (int k = 0; k < d; ++k) acc += row[k] * wrow[k];
      out.at(i, j, 0, 0) = acc;
    }
  }
  return out;
}

DenseGrads dense_backward(const Tensor& input, const Tensor& weights,
                          const Tensor& grad_out) {
  const int d = input.c * input.h * input.w;
  const int m = weights.n;
  if (weights.c * weights.h * weights.w != d)
    shape_fail("dense input dim " + std::to_string(d) + " != weight dim");
  if (grad_out.n != input.n || grad_out.c != m || grad_out.h != 1 || grad_out.w != 1)
    shape_fail("dense grad_out " + grad_out.shape_str() + " does not match forward output");
  DenseGrads g;
  g.input = Tensor::zeros(input.n, input.c, input.h, input.w);
  g.weights = Tensor::zeros(weights.n, weights.c, weights.h, weights.w);
  g.bias.assign(m, 0.0f);
  for (int i = 0; i < input.n; ++i) {
    const float* row = &input.data[static_cast<std::size_t>(i) * d];
    float* girow = &g.input.data[static_cast<std::size_t>(i) * d];
    for (int j = 0; j < m; ++j) {
      const float go = grad_out.at(i, j, 0, 0);
      g.bias[j] += go;
      const float* wrow = &weights.data[static_cast<std::size_t>(j) * d];
      float* gwrow = &g.weights.data[static_cast<std::size_t>(j) * d];
      for (int k = 0; k < d; ++k) {
        girow[k] += go * wrow[k];
        gwrow[k] += go * row[k];
      }
    }
  }
  return g;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  if (!input.same_shape(grad_out))
    shape_fail("relu grad_out " + grad_out.shape_str() + " != input " + input.shape_str());
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (input.data[i] <= 0.0f) g.data[i] = 0.0f;
  return g;
}

SoftmaxResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  const int n = logits.n;
  const int k = logits.c * logits.h * logits.w;
  if (static_cast<int>(labels.size()) != n)
    shape_fail("softmax labels length " + std::to_string(labels.size()) + " != batch " +
               std::to_string(n));
  SoftmaxResult r;
  r.probs = Tensor(n, k, 1, 1);
  r.grad_logits = Tensor(n, k, 1, 1);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw std::invalid_argument("softmax label " + std::to_string(labels[i]) +
                                  " out of range [0, " + std::to_string(k) + ")");
    const float* row = &logits.data[static_cast<std::size_t>(i) * k];
    float* prow = &r.probs.data[static_cast<std::size_t>(i) * k];
    float mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    float denom = 0.0f;
    for (int j = 0; j < k; ++j) {
      prow[j] = std::exp(row[j] - mx);
      denom += prow[j];
    }
    for (int j = 0; j < k; ++j) prow[j] /= denom;
    loss += -std::log(static_cast<double>(std::max(prow[labels[i]], 1e-30f)));
    float* grow = &r.grad_logits.data[static_cast<std::size_t>(i) * k];
    for (int j = 0; j < k; ++j) grow[j] = prow[j] / static_cast<float>(n);
    grow[labels[i]] -= 1.0f / static_cast<float>(n);
  }
  r.loss = static_cast<float>(loss / n);
  return r;
}

Tensor finite_diff_grad(const std::function<float(const Tensor&)>& f,
                        const Tensor& x, float eps) {
  Tensor g(x.n, x.c, x.h, x.w);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float orig = probe.data[i];
    probe.data[i] = orig + eps;
    const float fp = f(probe);
    probe.data[i] = orig - eps;
    const float fm = f(probe);
    probe.data[i] = orig;
    g.data[i] = (fp - fm) / (2.0f * eps);
  }
  return g;
}

}  // namespace ptrain
