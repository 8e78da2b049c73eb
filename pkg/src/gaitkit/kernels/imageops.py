"""Shared raster helpers (single numpy implementation; these are not hot
enough to justify dual backends)."""

import numpy as np


def resize_bilinear(img, out_h, out_w):
    """Bilinear resample of (..., H, W) to (..., out_h, out_w); half-pixel
    center convention, edges clamped."""
    h, w = img.shape[-2], img.shape[-1]
    if h == out_h and w == out_w:
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)

    ya, yb = y0[:, None], y1[:, None]
    xa, xb = x0[None, :], x1[None, :]
    wyc = wy[:, None]
    wxc = wx[None, :]
    top = img[..., ya, xa] * (1 - wxc) + img[..., ya, xb] * wxc
    bot = img[..., yb, xa] * (1 - wxc) + img[..., yb, xb] * wxc
    return (top * (1 - wyc) + bot * wyc).astype(img.dtype, copy=False)


def foreground_bbox(mask):
    """Rows/cols spanned by nonzero pixels; None when the mask is empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
