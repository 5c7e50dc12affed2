#include <random>
#include <stdexcept>
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ptrain/model.hpp"

using namespace ptrain;

namespace {

int count_kind(const NetworkSpec& spec, LayerKind kind) {
  int n = 0;
  for (const LayerSpec& l : spec.layers)
    if (l.kind == kind) ++n;
  return n;
}

Tensor random_images(int n, int c, int h, int w, std::mt19937& rng, float scale = 1.0f) {
  Tensor t(n, c, h, w);
  std::uniform_real_distribution<float> dist(-scale, scale);
  for (float& v : t.data) v = dist(rng);
  return t;
}

// Tiny tie-resistant network for whole-net gradient checks.
NetworkSpec tiny_net() {
  return NetworkSpec(Shape3{2, 6, 6},
                     {LayerSpec::make_conv(3, 3, 3, 1, 1), LayerSpec::make_pool(2, 2, 2),
                      LayerSpec::make_conv(2, 3, 3, 1, 1), LayerSpec::make_flatten(),
                      LayerSpec::make_dense(3), LayerSpec::make_softmax(3)});
}

}  // namespace

TEST_CASE("build_alexnet_scaled structure") {
  NetworkSpec spec = build_alexnet_scaled(Shape3{3, 64, 64}, 10, 0.25f);
  CHECK(count_kind(spec, LayerKind::Conv) == 5);
  CHECK(count_kind(spec, LayerKind::MaxPool) == 3);
  CHECK(count_kind(spec, LayerKind::Dense) == 2);
  CHECK(count_kind(spec, LayerKind::SoftmaxXent) == 1);

  // scale 0.25 -> channels (8,16,24,24,16)
  std::vector<int> channels;
  for (const LayerSpec& l : spec.layers)
    if (l.kind == LayerKind::Conv) channels.push_back(l.conv.out_channels);
  CHECK(channels == std::vector<int>{8, 16, 24, 24, 16});
  CHECK(spec.classes() == 10);
}

TEST_CASE("build_alexnet_scaled rejects too-small input, naming the layer") {
  try {
    build_alexnet_scaled(Shape3{3, 4, 4}, 10, 0.25f);
    FAIL("expected construction error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("layer") != std::string::npos);
  }
  CHECK_THROWS_AS(build_alexnet_scaled(Shape3{3, 64, 64}, 10, 0.001f), std::invalid_argument);
}

TEST_CASE("network validation") {
  // softmax not terminal
  CHECK_THROWS_AS(NetworkSpec(Shape3{1, 2, 2}, {LayerSpec::make_softmax(4),
                                                LayerSpec::make_relu()}),
                  std::invalid_argument);
  // logit dim mismatch
  CHECK_THROWS_AS(NetworkSpec(Shape3{1, 2, 2}, {LayerSpec::make_flatten(),
                                                LayerSpec::make_softmax(3)}),
                  std::invalid_argument);
  // no softmax at all
  CHECK_THROWS_AS(NetworkSpec(Shape3{1, 2, 2}, {LayerSpec::make_flatten()}),
                  std::invalid_argument);
}

TEST_CASE("init_params determinism and momentum zeroing") {
  NetworkSpec spec = tiny_net();
  ParamState a = init_params(spec, 42);
  ParamState b = init_params(spec, 42);
  REQUIRE(a.layers.size() == b.layers.size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(a.layers[i].weights.data == b.layers[i].weights.data);
    CHECK(a.layers[i].bias == b.layers[i].bias);
    for (float v : a.layers[i].w_mom.data) CHECK(v == 0.0f);
    for (float v : a.layers[i].b_mom) CHECK(v == 0.0f);
    for (float v : a.layers[i].bias) CHECK(v == 0.0f);
  }

  ParamState c = init_params(spec, 43);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].weights.data != c.layers[i].weights.data) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("forward_backward on a zero-weight network") {
  NetworkSpec spec = tiny_net();
  ParamState params = init_params(spec, 1);
  for (LayerParams& p : params.layers)
    for (float& v : p.weights.data) v = 0.0f;

  std::mt19937 rng(3);
  Tensor images = random_images(6, 2, 6, 6, rng);
  std::vector<int> labels = {0, 1, 2, 0, 1, 2};  // balanced
  StepResult r = forward_backward(spec, params, images, labels);
  CHECK(r.loss == doctest::Approx(std::log(3.0f)).epsilon(1e-5));
  CHECK(r.accuracy == doctest::Approx(1.0f / 3.0f));  // argmax ties resolve to class 0
  REQUIRE(r.grads.layers.size() == params.layers.size());
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    CHECK(r.grads.layers[i].weights.same_shape(params.layers[i].weights));
    CHECK(r.grads.layers[i].bias.size() == params.layers[i].bias.size());
  }
}

TEST_CASE("duplicating the batch leaves the mean loss unchanged") {
  NetworkSpec spec = tiny_net();
  ParamState params = init_params(spec, 9);
  std::mt19937 rng(4);
  Tensor images = random_images(4, 2, 6, 6, rng);
  std::vector<int> labels = {0, 1, 2, 1};

  Tensor doubled(8, 2, 6, 6);
  std::copy(images.data.begin(), images.data.end(), doubled.data.begin());
  std::copy(images.data.begin(), images.data.end(), doubled.data.begin() + images.size());
  std::vector<int> labels2 = {0, 1, 2, 1, 0, 1, 2, 1};

  const float l1 = forward_backward(spec, params, images, labels).loss;
  const float l2 = forward_backward(spec, params, doubled, labels2).loss;
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-6));
}

TEST_CASE("whole-network gradient matches finite differences") {
  NetworkSpec spec = tiny_net();
  std::mt19937 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    ParamState params = init_params(spec, 100 + trial);
    // widen the first conv so pool-window gaps dwarf the probe perturbation,
    // and the final dense layer so upstream gradients sit comfortably above
    // the finite-difference resolution of a float32 loss
    for (float& v : params.layers[0].weights.data) v *= 30.0f;
    for (float& v : params.layers.back().weights.data) v *= 30.0f;
    Tensor images = random_images(3, 2, 6, 6, rng);
    std::vector<int> labels = {0, 2, 1};
    StepResult step = forward_backward(spec, params, images, labels);

    for (std::size_t li = 0; li < params.layers.size(); ++li) {
      Tensor& w = params.layers[li].weights;
      float gmax = 0.0f;
      for (float v : step.grads.layers[li].weights.data) gmax = std::max(gmax, std::fabs(v));
      // A systematically wrong layer gradient misses on nearly every element;
      // a finite difference that straddles a relu or pool kink misses on an
      // isolated one. Require near-unanimous agreement rather than unanimity.
      int total = 0, good = 0;
      for (std::size_t e = 0; e < w.size(); e += 7) {  // sampled elements
        const float orig = w.data[e];
        const float eps = 1e-3f;
        w.data[e] = orig + eps;
        const float fp = forward_backward(spec, params, images, labels).loss;
        w.data[e] = orig - eps;
        const float fm = forward_backward(spec, params, images, labels).loss;
        w.data[e] = orig;
        const float numeric = (fp - fm) / (2 * eps);
        const float analytic = step.grads.layers[li].weights.data[e];
        const float denom =
            std::max({std::fabs(numeric), std::fabs(analytic), 0.05f * gmax, 1e-3f});
        ++total;
        if (std::fabs(numeric - analytic) / denom <= 2e-2f) ++good;
      }
      CHECK(good >= total - std::max(1, total / 10));
    }
  }
}

TEST_CASE("sgd_momentum_step arithmetic") {
  NetworkSpec spec(Shape3{1, 1, 1}, {LayerSpec::make_dense(1), LayerSpec::make_softmax(1)});
  ParamState params = init_params(spec, 0);
  params.layers[0].weights.data[0] = 0.0f;
  ParamGrads grads;
  grads.layers.resize(1);
  grads.layers[0].weights = Tensor(1, 1, 1, 1);
  grads.layers[0].weights.data[0] = 1.0f;
  grads.layers[0].bias = {0.0f};
  Hyper hyper{0.1f, 0.9f};

  sgd_momentum_step(params, grads, hyper);
  CHECK(params.layers[0].w_mom.data[0] == doctest::Approx(-0.1f));
  CHECK(params.layers[0].weights.data[0] == doctest::Approx(-0.1f));

  sgd_momentum_step(params, grads, hyper);
  CHECK(params.layers[0].weights.data[0] == doctest::Approx(-0.29f));

  // zero grad, zero momentum -> unchanged
  ParamState fresh = init_params(spec, 5);
  const std::vector<float> before = fresh.layers[0].weights.data;
  grads.layers[0].weights.data[0] = 0.0f;
  sgd_momentum_step(fresh, grads, hyper);
  CHECK(fresh.layers[0].weights.data == before);
}

TEST_CASE("update linearity: mean of two updated states == update by mean gradient") {
  NetworkSpec spec = tiny_net();
  std::mt19937 rng(55);
  Tensor images = random_images(4, 2, 6, 6, rng);
  std::vector<int> labels_a = {0, 1, 2, 0}, labels_b = {2, 1, 0, 1};
  Hyper hyper{0.05f, 0.9f};

  ParamState base = init_params(spec, 7);
  // give the momentum some nonzero history
  StepResult warm = forward_backward(spec, base, images, labels_a);
  sgd_momentum_step(base, warm.grads, hyper);

  ParamGrads g1 = forward_backward(spec, base, images, labels_a).grads;
  ParamGrads g2 = forward_backward(spec, base, images, labels_b).grads;

  ParamState s1 = base, s2 = base, sm = base;
  sgd_momentum_step(s1, g1, hyper);
  sgd_momentum_step(s2, g2, hyper);

  ParamGrads gmean;
  gmean.layers.resize(g1.layers.size());
  for (std::size_t i = 0; i < g1.layers.size(); ++i) {
    gmean.layers[i].weights = g1.layers[i].weights;
    for (std::size_t e = 0; e < gmean.layers[i].weights.size(); ++e)
      gmean.layers[i].weights.data[e] =
          0.5f * (g1.layers[i].weights.data[e] + g2.layers[i].weights.data[e]);
    gmean.layers[i].bias = g1.layers[i].bias;
    for (std::size_t e = 0; e < gmean.layers[i].bias.size(); ++e)
      gmean.layers[i].bias[e] = 0.5f * (g1.layers[i].bias[e] + g2.layers[i].bias[e]);
  }
  sgd_momentum_step(sm, gmean, hyper);

  for (std::size_t i = 0; i < sm.layers.size(); ++i) {
    for (std::size_t e = 0; e < sm.layers[i].weights.size(); ++e) {
      const float avg = 0.5f * (s1.layers[i].weights.data[e] + s2.layers[i].weights.data[e]);
      CHECK(std::fabs(avg - sm.layers[i].weights.data[e]) <= 1e-6f);
    }
    for (std::size_t e = 0; e < sm.layers[i].bias.size(); ++e) {
      const float avg = 0.5f * (s1.layers[i].bias[e] + s2.layers[i].bias[e]);
      CHECK(std::fabs(avg - sm.layers[i].bias[e]) <= 1e-6f);
    }
  }
}

TEST_CASE("flatten/unflatten round trip") {
  NetworkSpec spec = tiny_net();
  ParamState params = init_params(spec, 33);
  // perturb momentum so the round trip covers all four arrays
  params.layers[0].w_mom.data[0] = 0.125f;
  params.layers[1].b_mom[0] = -2.5f;

  const std::vector<std::uint8_t> wire = flatten_state(params);
  CHECK(wire.size() == 12 + 4 * spec.state_float_count());

  ParamState back = unflatten_state(wire, spec);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    CHECK(back.layers[i].weights.data == params.layers[i].weights.data);
    CHECK(back.layers[i].bias == params.layers[i].bias);
    CHECK(back.layers[i].w_mom.data == params.layers[i].w_mom.data);
    CHECK(back.layers[i].b_mom == params.layers[i].b_mom);
  }

  // truncation rejected with a length error
  std::vector<std::uint8_t> cut(wire.begin(), wire.end() - 4);
  CHECK_THROWS_AS(unflatten_state(cut, spec), std::runtime_error);
  std::vector<std::uint8_t> bad = wire;
  bad[0] = 'X';
  CHECK_THROWS_AS(unflatten_state(bad, spec), std::runtime_error);
}

TEST_CASE("forward_backward is bit-reproducible") {
  NetworkSpec spec = tiny_net();
  ParamState params = init_params(spec, 2);
  std::mt19937 rng(8);
  Tensor images = random_images(3, 2, 6, 6, rng);
  std::vector<int> labels = {1, 0, 2};
  StepResult a = forward_backward(spec, params, images, labels);
  StepResult b = forward_backward(spec, params, images, labels);
  CHECK(a.loss == b.loss);
  for (std::size_t i = 0; i < a.grads.layers.size(); ++i)
    CHECK(a.grads.layers[i].weights.data == b.grads.layers[i].weights.data);
}
