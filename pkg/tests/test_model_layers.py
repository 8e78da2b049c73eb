"""Finite-difference verification of every hand-written backward pass, plus
numba/numpy backend agreement for the convolution kernels."""

import numpy as np
import pytest

from gaitkit.kernels import (conv2d_backward_input, conv2d_backward_weight,
                             conv2d_forward)
from gaitkit.model import layers
from gaitkit.model.network import FusionModule


def _rng():
    return np.random.Generator(np.random.PCG64(1234))


def _fd(f, x, i, eps=1e-6):
    xp = x.copy(); xp[i] += eps
    xm = x.copy(); xm[i] -= eps
    return (f(xp) - f(xm)) / (2 * eps)


def _spot_check(f, x, grad, rng, n=8, tol=1e-6):
    for _ in range(n):
        i = tuple(rng.integers(0, s) for s in x.shape)
        fd = _fd(f, x, i)
        assert grad[i] == pytest.approx(fd, rel=1e-4, abs=tol)


# --- convolution kernels -------------------------------------------------------

@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1)])
def test_conv_gradients(stride, pad, k):
    rng = _rng()
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, k, k))
    r = rng.normal(size=conv2d_forward(x, w, stride, pad).shape)

    def loss_x(xq):
        return float((conv2d_forward(xq, w, stride, pad) * r).sum())

    def loss_w(wq):
        return float((conv2d_forward(x, wq, stride, pad) * r).sum())

    gx = conv2d_backward_input(r, w, x.shape, stride, pad)
    gw = conv2d_backward_weight(r, x, w.shape, stride, pad)
    _spot_check(loss_x, x, gx, rng)
    _spot_check(loss_w, w, gw, rng)


def test_conv_backends_agree(monkeypatch):
    rng = _rng()
    x = rng.normal(size=(2, 5, 9, 9)).astype(np.float32)
    w = rng.normal(size=(7, 5, 3, 3)).astype(np.float32)
    gy = rng.normal(size=(2, 7, 5, 5)).astype(np.float32)
    results = {}
    for mode in ("numpy", "numba"):
        monkeypatch.setenv("GAITKIT_BACKEND", mode)
        results[mode] = (conv2d_forward(x, w, 2, 1),
                         conv2d_backward_input(gy, w, x.shape, 2, 1),
                         conv2d_backward_weight(gy, x, w.shape, 2, 1))
    for a, b in zip(results["numpy"], results["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)


# --- batchnorm -------------------------------------------------------------------

def test_bn2d_train_gradients():
    rng = _rng()
    x = rng.normal(2.0, 3.0, size=(6, 4, 5, 5))
    bn = layers.BatchNorm2d(4, dtype=np.float64)
    bn.gamma.data[:] = rng.normal(1, 0.2, 4)
    bn.beta.data[:] = rng.normal(0, 0.2, 4)
    r = rng.normal(size=x.shape)

    def loss(xq):
        b2 = layers.BatchNorm2d(4, dtype=np.float64)
        b2.gamma.data[:] = bn.gamma.data
        b2.beta.data[:] = bn.beta.data
        return float((b2.forward(xq, True) * r).sum())

    bn.forward(x, True)
    gx = bn.backward(r)
    _spot_check(loss, x, gx, rng, tol=1e-5)


def test_bn2d_param_gradients():
    rng = _rng()
    x = rng.normal(size=(5, 3, 4, 4))
    r = rng.normal(size=x.shape)
    bn = layers.BatchNorm2d(3, dtype=np.float64)
    bn.forward(x, True)
    bn.backward(r)
    eps = 1e-6
    for c in range(3):
        for param, grad in ((bn.gamma, bn.gamma.grad), (bn.beta, bn.beta.grad)):
            orig = param.data[c]
            param.data[c] = orig + eps
            up = float((layers.BatchNorm2d.forward(bn, x, True) * r).sum())
            param.data[c] = orig - eps
            dn = float((layers.BatchNorm2d.forward(bn, x, True) * r).sum())
            param.data[c] = orig
            assert grad[c] == pytest.approx((up - dn) / (2 * eps), rel=1e-5)


def test_bn_running_stats_and_eval_mode():
    rng = _rng()
    bn = layers.BatchNorm2d(2, dtype=np.float64, momentum=0.1)
    x = rng.normal(3.0, 2.0, size=(8, 2, 4, 4))
    bn.forward(x, True)
    mu = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(bn.running_mean, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(bn.last_batch_stats[0], mu, rtol=1e-12)
    # eval mode must not mutate state
    rm = bn.running_mean.copy()
    rv = bn.running_var.copy()
    bn.forward(rng.normal(size=(4, 2, 4, 4)), False)
    np.testing.assert_array_equal(bn.running_mean, rm)
    np.testing.assert_array_equal(bn.running_var, rv)


def test_bn1d_gradients():
    rng = _rng()
    x = rng.normal(size=(7, 10))
    r = rng.normal(size=x.shape)
    bn = layers.BatchNorm1d(10, dtype=np.float64)

    def loss(xq):
        return float((layers.BatchNorm1d.forward(bn, xq, True) * r).sum())

    bn.forward(x, True)
    gx = bn.backward(r)
    _spot_check(loss, x, gx, rng, tol=1e-5)


# --- blocks / pooling ---------------------------------------------------------------

def test_residual_block_gradients():
    rng = _rng()
    blk = layers.ResidualBlock(3, 6, 2, rng, dtype=np.float64)
    x = rng.normal(size=(2, 3, 8, 8))
    r = rng.normal(size=(2, 6, 4, 4))

    def loss(xq):
        return float((blk.forward(xq, True) * r).sum())

    blk.forward(x, True)
    gx = blk.backward(r)
    _spot_check(loss, x, gx, rng, tol=1e-5)


def test_separate_fc_gradients():
    rng = _rng()
    fc = layers.SeparateFC(4, 6, 5, rng, dtype=np.float64)
    x = rng.normal(size=(3, 6, 4))
    r = rng.normal(size=(3, 5, 4))

    def loss(xq):
        return float((fc.forward(xq, True) * r).sum())

    fc.forward(x, True)
    gx = fc.backward(r)
    _spot_check(loss, x, gx, rng)
    eps = 1e-6
    for _ in range(6):
        i = tuple(rng.integers(0, s) for s in fc.weight.data.shape)
        orig = fc.weight.data[i]
        fc.weight.data[i] = orig + eps
        up = float((fc.forward(x, True) * r).sum())
        fc.weight.data[i] = orig - eps
        dn = float((fc.forward(x, True) * r).sum())
        fc.weight.data[i] = orig
        assert fc.weight.grad[i] == pytest.approx((up - dn) / (2 * eps), rel=1e-5)


def test_cosine_classifier_gradients_and_scale():
    rng = _rng()
    cls = layers.CosineClassifier(3, 5, 4, rng, dtype=np.float64, scale=16.0)
    x = rng.normal(size=(4, 5, 3))
    out = cls.forward(x, True)
    assert np.abs(out).max() <= 16.0 + 1e-9  # cosine bounded
    r = rng.normal(size=out.shape)

    def loss(xq):
        return float((cls.forward(xq, True) * r).sum())

    cls.forward(x, True)
    gx = cls.backward(r)
    _spot_check(loss, x, gx, rng, tol=1e-5)
    eps = 1e-6
    for _ in range(6):
        i = tuple(rng.integers(0, s) for s in cls.weight.data.shape)
        orig = cls.weight.data[i]
        cls.weight.data[i] = orig + eps
        up = loss(x)
        cls.weight.data[i] = orig - eps
        dn = loss(x)
        cls.weight.data[i] = orig
        cls.forward(x, True)
        cls.weight.grad[...] = 0
        cls.backward(r)
        assert cls.weight.grad[i] == pytest.approx((up - dn) / (2 * eps),
                                                   rel=1e-4, abs=1e-7)


def test_temporal_max_gradients():
    rng = _rng()
    x = rng.normal(size=(3, 5, 2, 4, 4))
    r = rng.normal(size=(3, 2, 4, 4))
    out, am = layers.temporal_max(x)
    np.testing.assert_allclose(out, x.max(axis=1))
    gx = layers.temporal_max_backward(r, am, 5)

    def loss(xq):
        return float((xq.max(axis=1) * r).sum())

    _spot_check(loss, x, gx, rng)


def test_hpp_gradients_and_values():
    rng = _rng()
    x = rng.normal(size=(2, 3, 8, 4))
    out, cache = layers.hpp_forward(x, 4)
    strips = x.reshape(2, 3, 4, 8)
    np.testing.assert_allclose(out, strips.mean(-1) + strips.max(-1))
    r = rng.normal(size=out.shape)
    gx = layers.hpp_backward(r, cache, 4)

    def loss(xq):
        s = xq.reshape(2, 3, 4, 8)
        return float(((s.mean(-1) + s.max(-1)) * r).sum())

    _spot_check(loss, x, gx, rng)


def test_hpp_constant_input_gives_twice_value():
    x = np.full((1, 2, 16, 16), 0.7)
    out, _ = layers.hpp_forward(x, 16)
    np.testing.assert_allclose(out, 2 * 0.7)


def test_hpp_rejects_indivisible_height():
    import gaitkit.errors as errors
    with pytest.raises(errors.IndivisibleHeight):
        layers.hpp_forward(np.zeros((1, 1, 10, 4)), 4)


# --- fusion module (acceptance criterion 4 core) -----------------------------------

def test_fusion_gradients_fd_float64():
    rng = _rng()
    fm = FusionModule(8, rng, dtype=np.float64)
    # toy tensors shaped (T, C1, H, W) = (4, 8, 4, 4), batch of 1
    fi = rng.normal(size=(1, 4, 8, 4, 4))
    fj = rng.normal(size=(1, 4, 8, 4, 4))
    r = rng.normal(size=fi.shape)

    def loss(a, b):
        return float((fm.forward(a, b, False) * r).sum())

    fm.forward(fi, fj, True)
    gfi, gfj = fm.backward(r)
    assert np.abs(gfi).max() > 0 and np.abs(gfj).max() > 0
    eps = 1e-6
    for arr, grad in ((fi, gfi), (fj, gfj)):
        for _ in range(3):
            i = tuple(rng.integers(0, s) for s in arr.shape)
            ap = arr.copy(); ap[i] += eps
            am = arr.copy(); am[i] -= eps
            fd = ((loss(ap, fj) - loss(am, fj)) / (2 * eps) if arr is fi
                  else (loss(fi, ap) - loss(fi, am)) / (2 * eps))
            rel = abs(grad[i] - fd) / max(1e-12, abs(fd))
            assert rel < 1e-4
    # parameter gradients, same projection loss
    for p in (fm.mix_weight, fm.g1_w, fm.g1_b, fm.g2_w, fm.g2_b):
        for _ in range(2):
            i = tuple(rng.integers(0, s) for s in p.data.shape)
            orig = p.data[i]
            p.data[i] = orig + eps
            up = loss(fi, fj)
            p.data[i] = orig - eps
            dn = loss(fi, fj)
            p.data[i] = orig
            fd = (up - dn) / (2 * eps)
            assert p.grad[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_fusion_cache_stack_supports_multiple_pairs():
    rng = _rng()
    fm = FusionModule(4, rng, dtype=np.float64)
    a = rng.normal(size=(2, 3, 4, 4, 4))
    b = rng.normal(size=(2, 3, 4, 4, 4))
    c = rng.normal(size=(2, 3, 4, 4, 4))
    fm.forward(a, b, True)
    fm.forward(a, c, True)
    g2 = fm.backward(np.ones_like(a))   # pops the (a, c) call
    g1 = fm.backward(np.ones_like(a))   # pops the (a, b) call
    assert len(fm._stack) == 0
    assert g1[0].shape == a.shape and g2[0].shape == a.shape
