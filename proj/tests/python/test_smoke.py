"""Smoke tests for the Python bindings."""

import numpy as np
import pytest

import ptrain


def conv_oracle(x, w, b, stride=1, pad=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    return out


def test_conv2d_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8), dtype=np.float32)
    w = rng.standard_normal((4, 3, 3, 3), dtype=np.float32)
    b = rng.standard_normal(4, dtype=np.float32)
    got = ptrain.conv2d_forward(x, w, b, stride=1, pad=1)
    want = conv_oracle(x, w, b, stride=1, pad=1)
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-4)


def test_maxpool_and_relu():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4), dtype=np.float32)
    pooled, argmax = ptrain.maxpool_forward(x, 2, 2, 2)
    want = x.reshape(1, 2, 2, 2, 2, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(pooled, want)
    assert len(argmax) == pooled.size

    r = ptrain.relu(x)
    np.testing.assert_array_equal(r, np.maximum(x, 0))


def test_softmax_xent_uniform_logits():
    logits = np.zeros((4, 10, 1, 1), dtype=np.float32)
    loss, probs, grad = ptrain.softmax_xent(logits, [0, 1, 2, 3])
    assert loss == pytest.approx(np.log(10.0), rel=1e-6)
    np.testing.assert_allclose(probs, 0.1, rtol=1e-6)
    assert grad.shape == logits.shape


def test_state_round_trip():
    spec = ptrain.build_alexnet_scaled(3, 40, 40, 10, width_scale=0.125)
    params = ptrain.init_params(spec, seed=42)
    wire = params.flatten()
    assert len(wire) == 12 + 4 * spec.state_float_count
    again = ptrain.unflatten_state(wire, spec)
    assert again.flatten() == wire


def test_short_training_run_reduces_loss_deterministically():
    pixels, labels = ptrain.generate_synthetic(256, 4, 3, 40, 40, seed=5)
    spec = ptrain.build_alexnet_scaled(3, 32, 32, 4, width_scale=0.125)

    runs = [
        ptrain.train_replicated(spec, pixels, labels, 4, workers=1, global_batch=32,
                                iterations=12, lr=0.001, seed=5)
        for _ in range(2)
    ]
    assert runs[0]["loss_trace"] == runs[1]["loss_trace"]
    assert runs[0]["params"].flatten() == runs[1]["params"].flatten()
    assert runs[0]["sync_rounds"] == 12

    trace = runs[0]["loss_trace"]
    assert trace[-1] < trace[0]


def test_two_worker_equivalence():
    pixels, labels = ptrain.generate_synthetic(256, 4, 3, 40, 40, seed=6)
    spec = ptrain.build_alexnet_scaled(3, 32, 32, 4, width_scale=0.125)

    kwargs = dict(global_batch=32, iterations=1, lr=0.0001, seed=6)
    one = ptrain.train_replicated(spec, pixels, labels, 4, workers=1, **kwargs)
    two = ptrain.train_replicated(spec, pixels, labels, 4, workers=2, **kwargs)

    a = np.frombuffer(one["params"].flatten()[12:], dtype=np.float32)
    b = np.frombuffer(two["params"].flatten()[12:], dtype=np.float32)
    assert np.abs(a - b).max() <= 1e-5


def test_forward_logits_shape():
    spec = ptrain.build_alexnet_scaled(3, 32, 32, 7, width_scale=0.125)
    params = ptrain.init_params(spec, seed=0)
    images = np.zeros((3, 3, 32, 32), dtype=np.float32)
    logits = ptrain.forward_logits(spec, params, images)
    assert logits.shape == (3, 7, 1, 1)
