"""Point-cloud kernels: z-buffer scatter and density clustering.

Clustering semantics (shared by both backends and the test oracle):
a point is core when it has >= min_pts neighbors within eps (itself
excluded); clusters are connected components of core points under the
eps-graph; a non-core point joins the cluster of its smallest-index core
neighbor; everything else is noise (-1). Cluster ids are numbered by the
smallest core index they contain, so labels are order-independent.
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


def scatter_min_depth(px, py, depth, h, w):
    """Nearest-depth z-buffer: px, py integer pixel coords, returns (h, w)
    float array with +inf where nothing lands."""
    px = np.ascontiguousarray(px, dtype=np.int64)
    py = np.ascontiguousarray(py, dtype=np.int64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    if use_numba('geom'):
        return _scatter_numba(px, py, depth, h, w)
    return _scatter_numpy(px, py, depth, h, w)


def _scatter_numpy(px, py, depth, h, w):
    grid = np.full(h * w, np.inf)
    flat = py * w + px
    np.minimum.at(grid, flat, depth)
    return grid.reshape(h, w)


@njit(cache=True)
def _scatter_numba(px, py, depth, h, w):
    grid = np.full((h, w), np.inf)
    for i in range(px.shape[0]):
        d = depth[i]
        y = py[i]
        x = px[i]
        if d < grid[y, x]:
            grid[y, x] = d
    return grid


def cluster_labels(points, eps, min_pts):
    """Label each point per the module docstring. points: (n, 3) float."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int32)
    if use_numba('geom'):
        return _cluster_numba(pts, float(eps) ** 2, int(min_pts))
    return _cluster_numpy(pts, float(eps) ** 2, int(min_pts))


def _cluster_numpy(pts, eps2, min_pts):
    n = pts.shape[0]
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    adj = d2 <= eps2
    np.fill_diagonal(adj, False)
    core = adj.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.int32)
    nxt = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != -1:
            continue
        stack = [seed]
        labels[seed] = nxt
        while stack:
            i = stack.pop()
            for j in np.nonzero(adj[i] & core)[0]:
                if labels[j] == -1:
                    labels[j] = nxt
                    stack.append(j)
        nxt += 1
    for i in range(n):
        if core[i] or labels[i] != -1:
            continue
        nbr = np.nonzero(adj[i] & core)[0]
        if nbr.size:
            labels[i] = labels[nbr[0]]
    return labels


@njit(cache=True)
def _cluster_numba(pts, eps2, min_pts):
    n = pts.shape[0]
    core = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        cnt = 0
        for j in range(n):
            if i == j:
                continue
            d2 = ((pts[i, 0] - pts[j, 0]) ** 2 + (pts[i, 1] - pts[j, 1]) ** 2
                  + (pts[i, 2] - pts[j, 2]) ** 2)
            if d2 <= eps2:
                cnt += 1
        core[i] = cnt >= min_pts
    labels = np.full(n, -1, dtype=np.int32)
    stack = np.empty(n, dtype=np.int64)
    nxt = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != -1:
            continue
        top = 0
        stack[top] = seed
        top += 1
        labels[seed] = nxt
        while top > 0:
            top -= 1
            i = stack[top]
            for j in range(n):
                if not core[j] or labels[j] != -1:
                    continue
                d2 = ((pts[i, 0] - pts[j, 0]) ** 2 + (pts[i, 1] - pts[j, 1]) ** 2
                      + (pts[i, 2] - pts[j, 2]) ** 2)
                if d2 <= eps2:
                    labels[j] = nxt
                    stack[top] = j
                    top += 1
        nxt += 1
    for i in range(n):
        if core[i] or labels[i] != -1:
            continue
        for j in range(n):
            if core[j]:
                d2 = ((pts[i, 0] - pts[j, 0]) ** 2 + (pts[i, 1] - pts[j, 1]) ** 2
                      + (pts[i, 2] - pts[j, 2]) ** 2)
                if d2 <= eps2:
                    labels[i] = labels[j]
                    break
    return labels
