"""Finite-difference validation of the hand-derived network gradients."""

import numpy as np
import pytest

from volbake.mlp import FeatureEncoding, Mlp, squareplus, squareplus_d1, squareplus_d2


def central_diff_grad(loss_fn, flat, h=1e-5):
    g = np.zeros_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        dn = flat.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (loss_fn(up) - loss_fn(dn)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_activation_derivatives_match_fd(rng):
    x = rng.normal(size=200) * 0.2
    h = 1e-6
    for scale in (1.0, 30.0, 100.0):
        d1 = (squareplus(x + h, scale) - squareplus(x - h, scale)) / (2 * h)
        d2 = (squareplus_d1(x + h, scale) - squareplus_d1(x - h, scale)) / (2 * h)
        assert np.allclose(squareplus_d1(x, scale), d1, rtol=1e-4, atol=1e-6)
        assert np.allclose(squareplus_d2(x, scale), d2, rtol=1e-3, atol=1e-3)
    # ReLU-like asymptotics at sharp scales
    assert squareplus(5.0, 100.0) == pytest.approx(5.0, abs=1e-4)
    assert squareplus(-5.0, 100.0) == pytest.approx(0.0, abs=1e-4)


def test_encoding_jacobian_matches_fd(rng):
    enc = FeatureEncoding(n_freq=4)
    p = rng.normal(size=(10, 3))
    J = enc.jacobian(p)
    h = 1e-6
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        fd = (enc.encode(p + dp) - enc.encode(p - dp)) / (2 * h)
        assert np.allclose(J[:, :, k], fd, rtol=1e-5, atol=1e-7)


def test_backward_matches_fd(rng):
    net = Mlp([9, 8, 8, 1], rng, act_scale=30.0, dtype=np.float64)
    enc = FeatureEncoding(n_freq=1)
    p = rng.normal(size=(20, 3)) * 0.5
    x = enc.encode(p)
    target = rng.normal(size=(20, 1))

    def loss_from_flat(flat):
        net.set_flat_params(flat)
        y = net.forward(x)
        return float(np.sum((y - target) ** 2))

    flat0 = net.flat_params()
    net.set_flat_params(flat0)
    y, cache = net.forward(x, want_cache=True)
    grads = net.backward(cache, 2.0 * (y - target))
    g_analytic = Mlp.flatten_grads(grads)
    g_fd = central_diff_grad(loss_from_flat, flat0)
    assert rel_err(g_analytic, g_fd) < 1e-6


def test_forward_jvp_matches_input_fd(rng):
    net = Mlp([15, 8, 8, 1], rng, act_scale=30.0, dtype=np.float64)
    enc = FeatureEncoding(n_freq=2)
    p = rng.normal(size=(12, 3)) * 0.5
    y, G, _ = net.forward_jvp(enc.encode(p), enc.jacobian(p))
    h = 1e-6
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        fd = (net.forward(enc.encode(p + dp)) - net.forward(enc.encode(p - dp))) / (2 * h)
        assert np.allclose(G[:, :, k], fd, rtol=1e-5, atol=1e-7)


def test_backward_jvp_matches_fd_for_gradient_loss(rng):
    """Double backprop: parameter gradients of a loss on the spatial gradient."""
    net = Mlp([15, 8, 8, 1], rng, act_scale=30.0, dtype=np.float64)
    enc = FeatureEncoding(n_freq=2)
    p = rng.normal(size=(16, 3)) * 0.5
    x, Tx = enc.encode(p), enc.jacobian(p)
    target = rng.normal(size=(16, 1))

    def loss_from_flat(flat):
        net.set_flat_params(flat)
        y, G, _ = net.forward_jvp(x, Tx)
        g = G[:, 0, :]
        norms = np.linalg.norm(g, axis=1)
        return float(np.mean((norms - 1.0) ** 2) + np.sum((y - target) ** 2))

    flat0 = net.flat_params()
    net.set_flat_params(flat0)
    y, G, cache = net.forward_jvp(x, Tx)
    g = G[:, 0, :]
    norms = np.linalg.norm(g, axis=1)
    dnorm = 2.0 * (norms - 1.0) / g.shape[0]
    dG = (dnorm / norms)[:, None] * g
    grads = net.backward_jvp(cache, 2.0 * (y - target), dG[:, None, :])
    g_analytic = Mlp.flatten_grads(grads)
    g_fd = central_diff_grad(loss_from_flat, flat0)
    assert rel_err(g_analytic, g_fd) < 1e-6
