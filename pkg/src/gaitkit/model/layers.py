"""Layer primitives with explicit forward/backward passes.

Spatial layers take (N, C, H, W); the network flattens (B, T) into N before
entering them. Parameters live in Param objects; backward() accumulates into
Param.grad so streams sharing a module sum their contributions naturally.
dtype follows the arrays handed in at construction (float32 for training,
float64 for the finite-difference checks).
"""

import numpy as np

from .. import errors
from ..kernels import (bnops, conv2d_backward_input, conv2d_backward_weight,
                       conv2d_forward)


class Param:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = data
        self.grad = np.zeros_like(data)


class Module:
    """Minimal container: subclasses set Param/buffer/child attributes."""

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val

    def named_params(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Param) and not name.startswith("_"):
                out[prefix + name] = val
        for name, child in self._children():
            out.update(child.named_params(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        # underscore attributes are transient caches, never persisted
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray) and not name.startswith("_"):
                out[prefix + name] = val
        for name, child in self._children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def state(self):
        st = {k: p.data for k, p in self.named_params().items()}
        st.update(self.named_buffers())
        return st

    def load_state(self, state):
        own = self.named_params()
        bufs = self.named_buffers()
        expected = set(own) | set(bufs)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise errors.CorruptCheckpoint(
                f"state mismatch; missing={missing[:5]} extra={extra[:5]}")
        for k, p in own.items():
            if p.data.shape != state[k].shape:
                raise errors.CorruptCheckpoint(
                    f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data[...] = state[k]
        for k, b in bufs.items():
            if b.shape != state[k].shape:
                raise errors.CorruptCheckpoint(
                    f"{k}: shape {state[k].shape} != {b.shape}")
            b[...] = state[k]

    def zero_grad(self):
        for p in self.named_params().values():
            p.grad[...] = 0


def he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride, pad, rng, dtype=np.float32):
        self.stride, self.pad = stride, pad
        self.weight = Param(he_init(rng, (cout, cin, k, k), cin * k * k, dtype))
        self._x = None

    def forward(self, x, training):
        if x.shape[1] != self.weight.data.shape[1]:
            raise errors.ShapeMismatch(
                f"conv expects {self.weight.data.shape[1]} channels, got {x.shape[1]}")
        self._x = x if training else None
        return conv2d_forward(x, self.weight.data, self.stride, self.pad)

    def backward(self, gy):
        self.weight.grad += conv2d_backward_weight(
            gy, self._x, self.weight.data.shape, self.stride, self.pad)
        return conv2d_backward_input(
            gy, self.weight.data, self._x.shape, self.stride, self.pad)


class _BatchNorm(Module):
    """Normalization as a fused per-feature affine: forward is one
    (sum, sum-of-squares) reduction plus one y = a*x + b pass (optionally
    fused with the following ReLU); backward is one (sum gy, sum gy*x)
    reduction plus one dx = a*gy + c2*x + c0 pass. Statistics accumulate in
    float64; see kernels.bnops for the numba/numpy pass implementations."""

    def __init__(self, num_features, dtype=np.float32, momentum=0.1,
                 eps=1e-5, fuse_relu=False):
        self.momentum, self.eps = momentum, eps
        self.fuse_relu = fuse_relu
        self.gamma = Param(np.ones(num_features, dtype=dtype))
        self.beta = Param(np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self._cache = None
        self.last_batch_stats = None

    def forward(self, x, training):
        n = x.size // self.gamma.data.size
        if training:
            s1, s2 = bnops.bn_stats(x)
            mu64 = s1 / n
            var64 = np.maximum(s2 / n - mu64 * mu64, 0.0)
            self.last_batch_stats = (mu64.astype(x.dtype), var64.astype(x.dtype))
            m = self.momentum
            unbiased = var64 * (n / max(1, n - 1))
            self.running_mean[...] = ((1 - m) * self.running_mean
                                      + m * mu64.astype(self.running_mean.dtype))
            self.running_var[...] = ((1 - m) * self.running_var
                                     + m * unbiased.astype(self.running_var.dtype))
        else:
            mu64 = self.running_mean.astype(np.float64)
            var64 = self.running_var.astype(np.float64)
        iv64 = 1.0 / np.sqrt(var64 + self.eps)
        g64 = self.gamma.data.astype(np.float64)
        a64 = g64 * iv64
        b64 = self.beta.data - g64 * mu64 * iv64
        y = bnops.bn_affine(x, a64, b64, relu=self.fuse_relu)
        self._cache = (x, y if self.fuse_relu else None, mu64, iv64, a64,
                       training)
        return y

    def backward(self, gy):
        x, y, mu64, iv64, a64, training = self._cache
        s_gy, s_gyx = bnops.bn_grad_stats(gy, x, y)
        # sum(gy * xhat) = ivar * (sum(gy*x) - mu*sum(gy))
        s_gy_xhat = iv64 * (s_gyx - mu64 * s_gy)
        self.gamma.grad += s_gy_xhat.astype(self.gamma.grad.dtype)
        self.beta.grad += s_gy.astype(self.beta.grad.dtype)
        g64 = self.gamma.data.astype(np.float64)
        zero = np.zeros_like(a64)
        if not training:
            return bnops.bn_backward_fused(gy, x, a64, zero, zero, y)
        n = gy.size // self.gamma.data.size
        mean_dxhat = g64 * s_gy / n
        mean_dxhat_xhat = g64 * s_gy_xhat / n
        # dx = ivar*(dxhat - mean_dxhat - xhat*mean_dxhat_xhat), expanded
        # into per-feature constants for the fused pass
        c2 = -iv64 * iv64 * mean_dxhat_xhat
        c0 = iv64 * (-mean_dxhat + iv64 * mean_dxhat_xhat * mu64)
        return bnops.bn_backward_fused(gy, x, a64, c2, c0, y)


class BatchNorm2d(_BatchNorm):
    pass


class BatchNorm1d(_BatchNorm):
    """Per-feature normalization of (N, F) inputs (BNNeck uses F = C3*P)."""


class EncoderBlock(Module):
    """Modal-specific encoder: one conv stage (3x3 stride 1) + BN + ReLU."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, 1, 1, rng, dtype)
        self.bn = BatchNorm2d(cout, dtype, fuse_relu=True)

    def forward(self, x, training):
        return self.bn.forward(self.conv.forward(x, training), training)

    def backward(self, gy):
        return self.conv.backward(self.bn.backward(gy))


class ResidualBlock(Module):
    """Standard 2-conv basic block; 1x1 projection shortcut on shape change."""

    def __init__(self, cin, cout, stride, rng, dtype=np.float32):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng, dtype)
        self.bn1 = BatchNorm2d(cout, dtype, fuse_relu=True)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, 0, rng, dtype)
            self.proj_bn = BatchNorm2d(cout, dtype)
        else:
            self.proj = None
        self._out = None

    def forward(self, x, training):
        main = self.bn2.forward(self.conv2.forward(
            self.bn1.forward(self.conv1.forward(x, training), training),
            training), training)
        if self.proj is not None:
            short = self.proj_bn.forward(self.proj.forward(x, training), training)
        else:
            short = x
        out = bnops.add_relu(main, short)
        self._out = out
        return out

    def backward(self, gy):
        g = bnops.masked_grad(gy, self._out)
        gx_main = self.conv1.backward(self.bn1.backward(
            self.conv2.backward(self.bn2.backward(g))))
        if self.proj is not None:
            gx_short = self.proj.backward(self.proj_bn.backward(g))
        else:
            gx_short = g
        return gx_main + gx_short


class CosineClassifier(Module):
    """Per-part cosine-similarity logits (GaitBase-style margin-free
    classifier): logits = scale * <f/|f|, w_c/|w_c|> for every part."""

    def __init__(self, parts, cin, num_classes, rng, dtype=np.float32,
                 scale=16.0):
        self.scale = scale
        self.weight = Param(he_init(rng, (parts, cin, num_classes), cin, dtype))
        self._cache = None

    def forward(self, x, training):
        if x.shape[1] != self.weight.data.shape[1] or \
                x.shape[2] != self.weight.data.shape[0]:
            raise errors.ShapeMismatch(
                f"classifier expects (N, {self.weight.data.shape[1]}, "
                f"{self.weight.data.shape[0]}), got {x.shape}")
        xn = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        wn = np.maximum(np.linalg.norm(self.weight.data, axis=1,
                                       keepdims=True), 1e-12)
        xh = x / xn
        wh = self.weight.data / wn
        logits = self.scale * np.einsum("ncp,pcd->ndp", xh, wh, optimize=True)
        self._cache = (xh, xn, wh, wn)
        return logits

    def backward(self, gy):
        xh, xn, wh, wn = self._cache
        dxh = self.scale * np.einsum("ndp,pcd->ncp", gy, wh, optimize=True)
        dwh = self.scale * np.einsum("ncp,ndp->pcd", xh, gy, optimize=True)
        # back through the l2 normalizations
        dx = (dxh - xh * (dxh * xh).sum(axis=1, keepdims=True)) / xn
        dw = (dwh - wh * (dwh * wh).sum(axis=1, keepdims=True)) / wn
        self.weight.grad += dw
        return dx


class SeparateFC(Module):
    """Independent linear map per horizontal part: (N, C, P) -> (N, D, P)."""

    def __init__(self, parts, cin, cout, rng, dtype=np.float32):
        self.weight = Param(he_init(rng, (parts, cin, cout), cin, dtype))
        self._x = None

    def forward(self, x, training):
        if x.shape[1] != self.weight.data.shape[1] or \
                x.shape[2] != self.weight.data.shape[0]:
            raise errors.ShapeMismatch(
                f"separate fc expects (N, {self.weight.data.shape[1]}, "
                f"{self.weight.data.shape[0]}), got {x.shape}")
        self._x = x
        return np.einsum("ncp,pcd->ndp", x, self.weight.data, optimize=True)

    def backward(self, gy):
        self.weight.grad += np.einsum("ncp,ndp->pcd", self._x, gy, optimize=True)
        return np.einsum("ndp,pcd->ncp", gy, self.weight.data, optimize=True)


def temporal_max(x):
    """(B, T, C, H, W) -> (B, C, H, W) element-wise max with argmax cache."""
    am = x.argmax(axis=1)
    out = np.take_along_axis(x, am[:, None], axis=1)[:, 0]
    return out, am


def temporal_max_backward(gy, am, t):
    gx = np.zeros((gy.shape[0], t) + gy.shape[1:], dtype=gy.dtype)
    np.put_along_axis(gx, am[:, None], gy[:, None], axis=1)
    return gx


def hpp_forward(x, parts):
    """(N, C, H, W) -> (N, C, P): mean + max over each horizontal strip."""
    n, c, h, w = x.shape
    if h % parts != 0:
        raise errors.IndivisibleHeight(f"H={h} not divisible by P={parts}")
    strips = x.reshape(n, c, parts, (h // parts) * w)
    am = strips.argmax(axis=3)
    out = strips.mean(axis=3) + np.take_along_axis(
        strips, am[..., None], axis=3)[..., 0]
    return out, (am, x.shape)


def hpp_backward(gy, cache, parts):
    am, shape = cache
    n, c, h, w = shape
    size = (h // parts) * w
    # every strip element receives the mean share; the argmax additionally
    # receives the whole max-path gradient
    gs = np.broadcast_to(gy[..., None] / size, gy.shape + (size,)).copy()
    np.put_along_axis(
        gs, am[..., None],
        np.take_along_axis(gs, am[..., None], axis=3) + gy[..., None], axis=3)
    return gs.reshape(n, c, h, w)
