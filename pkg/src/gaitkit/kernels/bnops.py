"""Fused batch-normalization passes for (N, C, H, W) tensors.

The normalization itself is an affine map y = a[c]*x + b[c] once the batch
statistics are known, so forward needs one reduction pass (sum and
sum-of-squares together) and one affine pass (optionally fused with the
following ReLU); backward needs one reduction pass over (gy, gy*x) and one
fused output pass. numpy fallbacks mirror the same math.

Like convops, the njit kernels run under full fastmath, which assumes
NaN/Inf-free data; training divergence still surfaces through the numpy
loss pipeline, and GAITKIT_BACKEND=numpy restores strict IEEE propagation
everywhere.
"""

import numpy as np

from .dispatch import use_numba, HAS_NUMBA

if HAS_NUMBA:
    from numba import njit, prange
else:  # pragma: no cover
    def njit(*args, **kwargs):
        def deco(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return deco

    prange = range


def bn_stats(x):
    """Per-channel (sum, sum of squares) in float64, one pass."""
    if use_numba('geom') and x.ndim == 4:
        return _bn_stats_numba(x)
    axes = tuple(i for i in range(x.ndim) if i != 1)
    spec = "nchw,nchw->c" if x.ndim == 4 else "nc,nc->c"
    return (x.sum(axis=axes, dtype=np.float64),
            np.einsum(spec, x, x, dtype=np.float64))


def bn_affine(x, a, b, relu=False):
    """y = a[c]*x + b[c], optionally clamped at zero."""
    if use_numba('geom') and x.ndim == 4:
        return _bn_affine_numba(x, a.astype(x.dtype), b.astype(x.dtype), relu)
    ps = (1, -1) + (1,) * (x.ndim - 2)
    y = a.astype(x.dtype).reshape(ps) * x + b.astype(x.dtype).reshape(ps)
    if relu:
        np.maximum(y, 0, out=y)
    return y


def bn_grad_stats(gy, x, y=None):
    """Per-channel (sum gy, sum gy*x) with the ReLU mask (y > 0) applied on
    the fly when y is given."""
    if use_numba('geom') and x.ndim == 4:
        if y is None:
            return _bn_gstats_numba(gy, x)
        return _bn_gstats_relu_numba(gy, x, y)
    if y is not None:
        gy = np.where(y > 0, gy, 0)
    axes = tuple(i for i in range(x.ndim) if i != 1)
    spec = "nchw,nchw->c" if x.ndim == 4 else "nc,nc->c"
    return (gy.sum(axis=axes, dtype=np.float64),
            np.einsum(spec, gy, x, dtype=np.float64))


def bn_backward_fused(gy, x, a, c2, c0, y=None):
    """dx = a[c]*gy + c2[c]*x + c0[c], with gy masked by (y > 0) first when
    y is given."""
    if use_numba('geom') and x.ndim == 4:
        return _bn_bwd_numba(gy, x, a.astype(x.dtype), c2.astype(x.dtype),
                             c0.astype(x.dtype), y if y is not None else gy,
                             y is not None)
    if y is not None:
        gy = np.where(y > 0, gy, 0)
    ps = (1, -1) + (1,) * (x.ndim - 2)
    return (a.astype(x.dtype).reshape(ps) * gy
            + c2.astype(x.dtype).reshape(ps) * x
            + c0.astype(x.dtype).reshape(ps))


def add_relu(a, b):
    """relu(a + b) for residual joins."""
    if use_numba('geom') and a.ndim == 4:
        return _add_relu_numba(a, b)
    return np.maximum(a + b, 0)


def masked_grad(gy, y):
    """gy where y > 0 else 0 (ReLU backward)."""
    if use_numba('geom') and gy.ndim == 4:
        return _masked_grad_numba(gy, y)
    return np.where(y > 0, gy, 0)


# --- numba kernels -------------------------------------------------------------

@njit(cache=True, parallel=True, fastmath=True)
def _bn_stats_numba(x):
    n, c, h, w = x.shape
    s1 = np.zeros(c, dtype=np.float64)
    s2 = np.zeros(c, dtype=np.float64)
    for ci in prange(c):
        a1 = 0.0
        a2 = 0.0
        for b in range(n):
            plane = x[b, ci]
            for i in range(h):
                row = plane[i]
                for j in range(w):
                    v = row[j]
                    a1 += v
                    a2 += v * v
        s1[ci] = a1
        s2[ci] = a2
    return s1, s2


@njit(cache=True, parallel=True, fastmath=True)
def _bn_affine_numba(x, a, b, relu):
    n, c, h, w = x.shape
    y = np.empty_like(x)
    for bi in prange(n):
        for ci in range(c):
            av = a[ci]
            bv = b[ci]
            src = x[bi, ci]
            dst = y[bi, ci]
            for i in range(h):
                for j in range(w):
                    v = av * src[i, j] + bv
                    if relu and v < 0.0:
                        v = 0.0
                    dst[i, j] = v
    return y


@njit(cache=True, parallel=True, fastmath=True)
def _bn_gstats_numba(gy, x):
    n, c, h, w = x.shape
    s1 = np.zeros(c, dtype=np.float64)
    s2 = np.zeros(c, dtype=np.float64)
    for ci in prange(c):
        a1 = 0.0
        a2 = 0.0
        for b in range(n):
            g = gy[b, ci]
            v = x[b, ci]
            for i in range(h):
                for j in range(w):
                    a1 += g[i, j]
                    a2 += g[i, j] * v[i, j]
        s1[ci] = a1
        s2[ci] = a2
    return s1, s2


@njit(cache=True, parallel=True, fastmath=True)
def _bn_gstats_relu_numba(gy, x, y):
    n, c, h, w = x.shape
    s1 = np.zeros(c, dtype=np.float64)
    s2 = np.zeros(c, dtype=np.float64)
    for ci in prange(c):
        a1 = 0.0
        a2 = 0.0
        for b in range(n):
            g = gy[b, ci]
            v = x[b, ci]
            m = y[b, ci]
            for i in range(h):
                for j in range(w):
                    if m[i, j] > 0.0:
                        a1 += g[i, j]
                        a2 += g[i, j] * v[i, j]
        s1[ci] = a1
        s2[ci] = a2
    return s1, s2


@njit(cache=True, parallel=True, fastmath=True)
def _bn_bwd_numba(gy, x, a, c2, c0, y, masked):
    n, c, h, w = x.shape
    dx = np.empty_like(x)
    for bi in prange(n):
        for ci in range(c):
            av = a[ci]
            c2v = c2[ci]
            c0v = c0[ci]
            g = gy[bi, ci]
            v = x[bi, ci]
            m = y[bi, ci]
            d = dx[bi, ci]
            for i in range(h):
                for j in range(w):
                    gv = g[i, j]
                    if masked and m[i, j] <= 0.0:
                        gv = 0.0
                    d[i, j] = av * gv + c2v * v[i, j] + c0v
    return dx


@njit(cache=True, parallel=True, fastmath=True)
def _add_relu_numba(a, b):
    n = a.shape[0]
    y = np.empty_like(a)
    for bi in prange(n):
        ya = y[bi].ravel()
        aa = a[bi].ravel()
        bb = b[bi].ravel()
        for i in range(ya.size):
            v = aa[i] + bb[i]
            ya[i] = v if v > 0.0 else 0.0
    return y


@njit(cache=True, parallel=True, fastmath=True)
def _masked_grad_numba(gy, y):
    n = gy.shape[0]
    out = np.empty_like(gy)
    for bi in prange(n):
        og = out[bi].ravel()
        gg = gy[bi].ravel()
        yy = y[bi].ravel()
        for i in range(og.size):
            og[i] = gg[i] if yy[i] > 0.0 else 0.0
    return out
