"""Orthographic raycaster for capsule bodies (plus one optional axis-aligned
box for the backpack condition).

Rays all share one direction; pixel (i, j) starts at
    corner + (j + 0.5) * right + (i + 0.5) * down.
Returns the entry depth along the ray, the winning primitive index
(capsule row index, n_capsules for the box, -1 for background) and the
surface normal at the hit. Everything is float64 in, float64 out; both
backends implement the same closed-form cylinder/sphere/slab tests.
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

_EPS = 1e-12


def raycast(corner, right, down, shape, view_dir, capsules, box=None):
    """capsules: (K, 7) rows [ax ay az bx by bz r]; box: (2, 3) lo/hi or None."""
    h, w = shape
    caps = np.ascontiguousarray(capsules, dtype=np.float64)
    if box is None:
        box_arr = np.zeros((2, 3))
        has_box = False
    else:
        box_arr = np.ascontiguousarray(box, dtype=np.float64)
        has_box = True
    args = (np.asarray(corner, float), np.asarray(right, float),
            np.asarray(down, float), h, w, np.asarray(view_dir, float),
            caps, box_arr, has_box)
    if use_numba('geom'):
        return _raycast_numba(*args)
    return _raycast_numpy(*args)


# --- numpy path --------------------------------------------------------------

def _pixel_origins(corner, right, down, h, w):
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    return (corner[None, :]
            + jj.reshape(-1, 1) * right[None, :]
            + ii.reshape(-1, 1) * down[None, :])


def _raycast_numpy(corner, right, down, h, w, vd, caps, box, has_box):
    o = _pixel_origins(corner, right, down, h, w)
    n = o.shape[0]
    depth = np.full(n, np.inf)
    prim = np.full(n, -1, dtype=np.int32)
    normal = np.zeros((n, 3))

    def commit(t, pid, nrm, valid):
        closer = valid & (t < depth)
        depth[closer] = t[closer]
        prim[closer] = pid
        normal[closer] = nrm[closer]

    for k in range(caps.shape[0]):
        a, b, r = caps[k, 0:3], caps[k, 3:6], caps[k, 6]
        d = b - a
        ln = np.sqrt(d @ d)
        if ln > _EPS:
            dhat = d / ln
            wd = vd @ dhat
            wp = vd - wd * dhat
            wp2 = wp @ wp
            m = o - a[None, :]
            md = m @ dhat
            mp = m - md[:, None] * dhat[None, :]
            if wp2 > _EPS:
                bq = mp @ wp
                cq = np.einsum('ij,ij->i', mp, mp) - r * r
                disc = bq * bq - wp2 * cq
                ok = disc >= 0.0
                t = np.where(ok, (-bq - np.sqrt(np.maximum(disc, 0.0))) / wp2, np.inf)
                s = md + t * wd
                ok &= (s >= 0.0) & (s <= ln) & (t > 0.0)
                hit = o + t[:, None] * vd[None, :]
                axis_pt = a[None, :] + s[:, None] * dhat[None, :]
                nrm = (hit - axis_pt) / r
                commit(t, k, nrm, ok)
        for cen in (a, b):
            oc = cen[None, :] - o
            q = oc @ vd
            c2 = np.einsum('ij,ij->i', oc, oc) - r * r
            disc = q * q - c2
            ok = disc >= 0.0
            t = np.where(ok, q - np.sqrt(np.maximum(disc, 0.0)), np.inf)
            ok &= t > 0.0
            hit = o + t[:, None] * vd[None, :]
            nrm = (hit - cen[None, :]) / r
            commit(t, k, nrm, ok)
            if ln <= _EPS:
                break

    if has_box:
        lo, hi = box[0], box[1]
        tmin = np.full(n, -np.inf)
        tmax = np.full(n, np.inf)
        ax_of_tmin = np.zeros(n, dtype=np.int32)
        inside_ok = np.ones(n, dtype=bool)
        for ax in range(3):
            if abs(vd[ax]) < _EPS:
                inside_ok &= (o[:, ax] >= lo[ax]) & (o[:, ax] <= hi[ax])
                continue
            t1 = (lo[ax] - o[:, ax]) / vd[ax]
            t2 = (hi[ax] - o[:, ax]) / vd[ax]
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            upd = near > tmin
            tmin = np.where(upd, near, tmin)
            ax_of_tmin = np.where(upd, ax, ax_of_tmin)
            tmax = np.minimum(tmax, far)
        ok = inside_ok & (tmax >= tmin) & (tmin > 0.0)
        nrm = np.zeros((n, 3))
        for ax in range(3):
            sel = ax_of_tmin == ax
            nrm[sel, ax] = -np.sign(vd[ax]) if abs(vd[ax]) >= _EPS else 0.0
        commit(np.where(ok, tmin, np.inf), caps.shape[0], nrm, ok)

    return (depth.reshape(h, w), prim.reshape(h, w), normal.reshape(h, w, 3))


# --- numba path --------------------------------------------------------------

@njit(cache=True)
def _hit_capsule(ox, oy, oz, wx, wy, wz, ax, ay, az, bx, by, bz, r):
    best_t = np.inf
    nx = ny = nz = 0.0
    dx, dy_, dz = bx - ax, by - ay, bz - az
    ln = np.sqrt(dx * dx + dy_ * dy_ + dz * dz)
    if ln > _EPS:
        ux, uy, uz = dx / ln, dy_ / ln, dz / ln
        wd = wx * ux + wy * uy + wz * uz
        wpx, wpy, wpz = wx - wd * ux, wy - wd * uy, wz - wd * uz
        wp2 = wpx * wpx + wpy * wpy + wpz * wpz
        mx, my, mz = ox - ax, oy - ay, oz - az
        md = mx * ux + my * uy + mz * uz
        mpx, mpy, mpz = mx - md * ux, my - md * uy, mz - md * uz
        if wp2 > _EPS:
            bq = mpx * wpx + mpy * wpy + mpz * wpz
            cq = mpx * mpx + mpy * mpy + mpz * mpz - r * r
            disc = bq * bq - wp2 * cq
            if disc >= 0.0:
                t = (-bq - np.sqrt(disc)) / wp2
                s = md + t * wd
                if t > 0.0 and 0.0 <= s <= ln:
                    hx = ox + t * wx - (ax + s * ux)
                    hy = oy + t * wy - (ay + s * uy)
                    hz = oz + t * wz - (az + s * uz)
                    best_t = t
                    nx, ny, nz = hx / r, hy / r, hz / r
    for cap in range(2):
        if cap == 0:
            cx, cy, cz = ax, ay, az
        else:
            if ln <= _EPS:
                break
            cx, cy, cz = bx, by, bz
        ocx, ocy, ocz = cx - ox, cy - oy, cz - oz
        q = ocx * wx + ocy * wy + ocz * wz
        c2 = ocx * ocx + ocy * ocy + ocz * ocz - r * r
        disc = q * q - c2
        if disc >= 0.0:
            t = q - np.sqrt(disc)
            if 0.0 < t < best_t:
                best_t = t
                nx = (ox + t * wx - cx) / r
                ny = (oy + t * wy - cy) / r
                nz = (oz + t * wz - cz) / r
    return best_t, nx, ny, nz


@njit(cache=True)
def _hit_box(ox, oy, oz, wx, wy, wz, lo, hi):
    tmin = -np.inf
    tmax = np.inf
    ax_min = -1
    o = (ox, oy, oz)
    vd = (wx, wy, wz)
    for ax in range(3):
        if abs(vd[ax]) < _EPS:
            if o[ax] < lo[ax] or o[ax] > hi[ax]:
                return np.inf, 0.0, 0.0, 0.0
            continue
        t1 = (lo[ax] - o[ax]) / vd[ax]
        t2 = (hi[ax] - o[ax]) / vd[ax]
        near = min(t1, t2)
        far = max(t1, t2)
        if near > tmin:
            tmin = near
            ax_min = ax
        if far < tmax:
            tmax = far
    if tmax < tmin or tmin <= 0.0 or ax_min < 0:
        return np.inf, 0.0, 0.0, 0.0
    nx = ny = nz = 0.0
    s = -1.0 if vd[ax_min] > 0 else 1.0
    if ax_min == 0:
        nx = s
    elif ax_min == 1:
        ny = s
    else:
        nz = s
    return tmin, nx, ny, nz


@njit(parallel=True, cache=True)
def _raycast_numba(corner, right, down, h, w, vd, caps, box, has_box):
    depth = np.full((h, w), np.inf)
    prim = np.full((h, w), -1, dtype=np.int32)
    normal = np.zeros((h, w, 3))
    nk = caps.shape[0]
    for i in prange(h):
        for j in range(w):
            ox = corner[0] + (j + 0.5) * right[0] + (i + 0.5) * down[0]
            oy = corner[1] + (j + 0.5) * right[1] + (i + 0.5) * down[1]
            oz = corner[2] + (j + 0.5) * right[2] + (i + 0.5) * down[2]
            bt = np.inf
            bp = -1
            bnx = bny = bnz = 0.0
            for k in range(nk):
                t, nx, ny, nz = _hit_capsule(
                    ox, oy, oz, vd[0], vd[1], vd[2],
                    caps[k, 0], caps[k, 1], caps[k, 2],
                    caps[k, 3], caps[k, 4], caps[k, 5], caps[k, 6])
                if t < bt:
                    bt, bp, bnx, bny, bnz = t, k, nx, ny, nz
            if has_box:
                t, nx, ny, nz = _hit_box(ox, oy, oz, vd[0], vd[1], vd[2],
                                         box[0], box[1])
                if t < bt:
                    bt, bp, bnx, bny, bnz = t, nk, nx, ny, nz
            depth[i, j] = bt
            prim[i, j] = bp
            normal[i, j, 0] = bnx
            normal[i, j, 1] = bny
            normal[i, j, 2] = bnz
    return depth, prim, normal
