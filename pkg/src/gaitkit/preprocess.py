"""Per-sensor processing: point-cloud cleanup, depth projection, silhouette
alignment, pose heatmaps, and event simulation. Everything here is a pure
function producing aligned 64x64 network inputs in [0, 1].
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .kernels import (cluster_labels, foreground_bbox, resize_bilinear,
                      scatter_min_depth)

log = logging.getLogger(__name__)

OUT_SIZE = 64

# 17-joint skeleton shared with the synthetic generator.
JOINT_NAMES = (
    "pelvis", "chest", "neck", "head_center", "head_top",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)
_J = {n: i for i, n in enumerate(JOINT_NAMES)}

# fixed 16-bone limb topology used by the heatmap limb channel
BONES = (
    (_J["pelvis"], _J["chest"]), (_J["chest"], _J["neck"]),
    (_J["neck"], _J["head_center"]), (_J["head_center"], _J["head_top"]),
    (_J["neck"], _J["l_shoulder"]), (_J["neck"], _J["r_shoulder"]),
    (_J["l_shoulder"], _J["l_elbow"]), (_J["l_elbow"], _J["l_wrist"]),
    (_J["r_shoulder"], _J["r_elbow"]), (_J["r_elbow"], _J["r_wrist"]),
    (_J["pelvis"], _J["l_hip"]), (_J["pelvis"], _J["r_hip"]),
    (_J["l_hip"], _J["l_knee"]), (_J["l_knee"], _J["l_ankle"]),
    (_J["r_hip"], _J["r_knee"]), (_J["r_knee"], _J["r_ankle"]),
)


@dataclass(frozen=True)
class ROI:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"ROI min must be < max per axis: {self.lo} {self.hi}")


@dataclass(frozen=True)
class ProjectionConfig:
    """Orthographic projection facing `axis` (the viewing direction, a
    horizontal unit vector); image up is world +z. Depth d = p . axis maps
    linearly from [d_near, d_far] to intensity [1, 0]; valid pixels are
    floored at 1/255 so they survive 8-bit storage. With recenter=True the
    cloud is shifted along the axis so its depth midrange sits at the
    window midpoint (projection then ignores absolute sensor distance)."""
    axis: tuple = (1.0, 0.0, 0.0)
    pixel_pitch: float = 0.018
    d_near: float = 0.0
    d_far: float = 1.5
    out_size: int = OUT_SIZE
    recenter: bool = True

    def __post_init__(self):
        if not self.d_near < self.d_far:
            raise ValueError("d_near must be < d_far")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")

    def basis(self):
        w = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(w)
        if n == 0:
            raise ValueError("axis must be nonzero")
        w = w / n
        if abs(w[2]) > 0.99:
            raise ValueError("axis must not be vertical")
        u = np.cross(w, np.array([0.0, 0.0, 1.0]))
        u /= np.linalg.norm(u)
        return w, u


def roi_filter(points, roi):
    """Closed-box crop, order preserved."""
    pts = np.asarray(points)
    if pts.shape[0] == 0:
        return pts.copy()
    lo = np.asarray(roi.lo)
    hi = np.asarray(roi.hi)
    keep = np.all((pts >= lo) & (pts <= hi), axis=1)
    return pts[keep]


def remove_ground(points, z_threshold=0.05):
    pts = np.asarray(points)
    if pts.shape[0] == 0:
        return pts.copy()
    return pts[pts[:, 2] > z_threshold]


def keep_main_cluster(points, eps=0.25, min_pts=5):
    """Largest density cluster (see kernels.pointops for the exact
    semantics); ties resolved by smallest contained point index. eps <= 0
    degenerates to every point being its own cluster."""
    pts = np.asarray(points)
    n = pts.shape[0]
    if n == 0:
        return pts.copy()
    if eps <= 0:
        return pts[:1].copy()
    labels = cluster_labels(pts, eps, min_pts)
    if (labels >= 0).sum() == 0:
        return pts[:0].copy()
    best_lab, best_key = None, None
    for lab in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == lab)
        key = (len(idx), -idx[0])  # largest; tie -> smallest member index
        if best_key is None or key > best_key:
            best_key, best_lab = key, lab
    return pts[labels == best_lab]


def project_to_grid(points, cfg):
    """Raw orthographic z-buffer before alignment: returns (intensity grid,
    mask) at native resolution. Nearest depth per pixel wins."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise errors.EmptyCloud("no points to project")
    w, u = cfg.basis()
    uc = pts @ u
    vc = pts[:, 2]
    d = pts @ w
    if cfg.recenter:
        d = d - (d.min() + d.max()) / 2.0 + (cfg.d_near + cfg.d_far) / 2.0
    pitch = cfg.pixel_pitch
    px = np.rint((uc - uc.min()) / pitch).astype(np.int64)
    py = np.rint((vc.max() - vc) / pitch).astype(np.int64)
    gw = int(px.max()) + 1
    gh = int(py.max()) + 1
    grid = scatter_min_depth(px, py, d, gh, gw)
    mask = np.isfinite(grid)
    inten = np.zeros((gh, gw), dtype=np.float64)
    span = cfg.d_far - cfg.d_near
    inten[mask] = np.clip((cfg.d_far - grid[mask]) / span, 1.0 / 255.0, 1.0)
    return inten, mask


def project_depth(points, cfg=ProjectionConfig()):
    """Point cloud -> aligned 3-channel 64x64 depth image in [0, 1]."""
    inten, mask = project_to_grid(points, cfg)
    align = compute_alignment(mask)
    img = apply_alignment(inten[None, :, :], mask, align, cfg.out_size)
    return np.repeat(img, 3, axis=0).astype(np.float32)


# --- silhouette-style alignment ---------------------------------------------

def compute_alignment(mask):
    """Foreground crop box + post-resize width for height-preserving aspect."""
    box = foreground_bbox(mask)
    if box is None:
        return None
    r0, r1, c0, c1 = box
    out_w = max(1, round((c1 - c0) * OUT_SIZE / (r1 - r0)))
    return r0, r1, c0, c1, out_w


def alignment_offset(mask, align, out_size=OUT_SIZE):
    """Horizontal start column that centers the resized foreground centroid."""
    r0, r1, c0, c1, out_w = align
    mcrop = mask[r0:r1, c0:c1].astype(np.float64)
    rmask = resize_bilinear(mcrop, out_size, out_w)
    tot = rmask.sum()
    if tot <= 0:
        centroid = (out_w - 1) / 2.0
    else:
        centroid = float((rmask.sum(axis=0) * np.arange(out_w)).sum() / tot)
    return int(round((out_size - 1) / 2.0 - centroid))


def apply_alignment(img, mask, align, out_size=OUT_SIZE):
    """Crop img (C, H, W) to the box, resize to height 64, center the
    resized mask's centroid column, pad/crop to 64 wide."""
    r0, r1, c0, c1, out_w = align
    crop = img[:, r0:r1, c0:c1].astype(np.float64)
    rimg = resize_bilinear(crop, out_size, out_w)
    start = alignment_offset(mask, align, out_size)
    canvas = np.zeros((img.shape[0], out_size, out_size), dtype=np.float64)
    src0 = max(0, -start)
    dst0 = max(0, start)
    width = min(out_w - src0, out_size - dst0)
    if width > 0:
        canvas[:, :, dst0:dst0 + width] = rimg[:, :, src0:src0 + width]
    return canvas


def normalize_silhouette(frames):
    """Binary mask stack (T, H, W) -> aligned (T', 1, 64, 64); empty frames
    are dropped with a warning."""
    frames = np.asarray(frames)
    out = []
    dropped = 0
    for t in range(frames.shape[0]):
        mask = frames[t] > 0
        align = compute_alignment(mask)
        if align is None:
            dropped += 1
            continue
        out.append(apply_alignment(mask[None].astype(np.float64), mask, align))
    if dropped:
        log.warning("normalize_silhouette dropped %d empty frame(s)", dropped)
    if not out:
        raise errors.AllFramesEmpty("every frame had an empty foreground")
    return np.stack(out).astype(np.float32)


# --- pose heatmaps -----------------------------------------------------------

def pose_to_heatmaps(joints2d, sigma=2.0, out_size=OUT_SIZE):
    """joints2d: (T, 17, 2) normalized (x, y) in [0, 1]^2. Channel 0 sums
    peak-1 Gaussians at joints; channel 1 sums Gaussian-profiled segments
    over the fixed 16-bone topology. Both clamp to [0, 1]."""
    joints2d = np.asarray(joints2d, dtype=np.float64)
    t, j, _ = joints2d.shape
    grid = np.arange(out_size, dtype=np.float64)
    gx, gy = np.meshgrid(grid, grid)  # gx: column coord, gy: row coord
    inv = 1.0 / (2.0 * sigma * sigma)
    out = np.zeros((t, 2, out_size, out_size), dtype=np.float64)
    for ti in range(t):
        px = joints2d[ti, :, 0] * out_size
        py = joints2d[ti, :, 1] * out_size
        d2 = (gx[None] - px[:, None, None]) ** 2 + (gy[None] - py[:, None, None]) ** 2
        out[ti, 0] = np.exp(-d2 * inv).sum(axis=0)
        limb = np.zeros((out_size, out_size))
        for a, b in BONES:
            ax, ay, bx, by = px[a], py[a], px[b], py[b]
            vx, vy = bx - ax, by - ay
            ln2 = vx * vx + vy * vy
            if ln2 < 1e-12:
                d2s = (gx - ax) ** 2 + (gy - ay) ** 2
            else:
                s = np.clip(((gx - ax) * vx + (gy - ay) * vy) / ln2, 0.0, 1.0)
                d2s = (gx - (ax + s * vx)) ** 2 + (gy - (ay + s * vy)) ** 2
            limb += np.exp(-d2s * inv)
        out[ti, 1] = limb
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --- event simulation ---------------------------------------------------------

_LOG_EPS = 1e-6


def simulate_events(rgb, threshold=0.1):
    """Log-intensity difference events on luminance (channel mean). Frame t
    holds events between t-1 and t; frame 0 is all zeros. Channels:
    positive events, negative events, |dlog| magnitude (clamped, masked to
    event pixels)."""
    rgb = np.asarray(rgb)
    if rgb.shape[0] < 2:
        raise errors.ShapeMismatch("need at least 2 frames for events")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    luma = rgb.mean(axis=1)
    lg = np.log(np.maximum(luma, _LOG_EPS))
    out = np.zeros((rgb.shape[0], 3) + luma.shape[1:], dtype=np.float32)
    diff = lg[1:] - lg[:-1]
    ev = np.abs(diff) > threshold
    out[1:, 0] = (ev & (diff > 0)).astype(np.float32)
    out[1:, 1] = (ev & (diff < 0)).astype(np.float32)
    out[1:, 2] = np.where(ev, np.clip(np.abs(diff), 0.0, 1.0), 0.0)
    return out


# --- full point pipeline -------------------------------------------------------

@dataclass(frozen=True)
class PointPipelineConfig:
    roi: ROI = field(default_factory=lambda: ROI((-50.0, -50.0, -1.0), (50.0, 50.0, 3.0)))
    z_threshold: float = 0.05
    eps: float = 0.25
    min_pts: int = 5
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)


def point_frames_to_depth(frames, cfg, view_axis):
    """ROI -> ground removal -> main cluster -> projection, per frame.
    Frames that end up empty are skipped (caller sees the shorter stack)."""
    proj = ProjectionConfig(axis=tuple(view_axis),
                            pixel_pitch=cfg.projection.pixel_pitch,
                            d_near=cfg.projection.d_near,
                            d_far=cfg.projection.d_far,
                            recenter=cfg.projection.recenter)
    out = []
    skipped = 0
    for pts in frames:
        pts = roi_filter(pts, cfg.roi)
        pts = remove_ground(pts, cfg.z_threshold)
        pts = keep_main_cluster(pts, cfg.eps, cfg.min_pts)
        if pts.shape[0] == 0:
            skipped += 1
            continue
        out.append(project_depth(pts, proj))
    if skipped:
        log.warning("point pipeline skipped %d empty frame(s)", skipped)
    if not out:
        raise errors.EmptyCloud("no frame survived the point pipeline")
    return np.stack(out)
