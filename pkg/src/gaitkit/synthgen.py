"""Deterministic synthetic multi-modal walking sequences.

A subject is a capsule body over a 17-joint skeleton driven by sinusoidal
joint angles (left/right limbs in anti-phase) walking along +x. A virtual
orthographic rig orbits the subject: view angle v places the camera so the
viewing direction is -(cos v, sin v, 0), i.e. 0 deg sees the walker
frontally and 90 deg from the side. One raycast per frame yields silhouette,
shaded RGB/IR, true depth, and the visible-surface point cloud (the
z-buffer back-projected, which is what a range sensor returns); events,
heatmaps, and projected depth reuse the preprocess pipelines so every
modality of a frame is pixel-aligned through the same crop.

Conditions: NM is the bare body; BG attaches a rigid box to the torso;
CL scales capsule radii (clothing) and leaves the skeleton untouched.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core, errors, preprocess
from .kernels import raycast

log = logging.getLogger(__name__)

J = {n: i for i, n in enumerate(preprocess.JOINT_NAMES)}

# gait amplitudes (radians); fixed so identity stays fully determined by
# the BodyParams fields
HIP_AMP = 0.5
KNEE_AMP = 0.9
KNEE_PHASE = 0.9
ARM_AMP = 0.35
ELBOW_AMP = 0.6
ELBOW_PHASE = 0.5
BOB_AMP = 0.015
FOOT_CLEARANCE = 0.16
TRIAL_PHASE_STEP = 2.4  # rad added per extra trial of the same subject


@dataclass(frozen=True)
class BodyParams:
    height_m: float
    limb_lengths: tuple   # (upper_arm, lower_arm, thigh, shin, torso, head_radius)
    limb_radii: tuple     # capsule radii, same order
    stride_freq_hz: float
    phase0: float
    bag_offset: tuple     # used only for BG trials
    clothing_scale: float  # used only for CL trials
    seed: int             # appearance (palette, bag shape) derivation

    def __post_init__(self):
        if any(v <= 0 for v in self.limb_lengths + self.limb_radii):
            raise ValueError("lengths and radii must be strictly positive")


def sample_identity(seed):
    """Deterministic body parameters for one synthetic subject."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    h = rng.uniform(1.5, 1.95)
    lengths = (
        0.170 * h * rng.uniform(0.94, 1.06),   # upper arm
        0.220 * h * rng.uniform(0.94, 1.06),   # lower arm + hand
        0.245 * h * rng.uniform(0.95, 1.05),   # thigh
        0.246 * h * rng.uniform(0.95, 1.05),   # shin
        0.300 * h * rng.uniform(0.95, 1.05),   # torso pelvis->neck
        0.065 * h * rng.uniform(0.92, 1.08),   # head radius
    )
    radii = (
        0.045 * rng.uniform(0.85, 1.15),
        0.038 * rng.uniform(0.85, 1.15),
        0.075 * rng.uniform(0.85, 1.15),
        0.055 * rng.uniform(0.85, 1.15),
        0.130 * rng.uniform(0.88, 1.12),
        lengths[5] * rng.uniform(0.96, 1.04),
    )
    freq = rng.uniform(0.7, 1.3)
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    bag = (-rng.uniform(0.16, 0.24), rng.uniform(-0.03, 0.03),
           rng.uniform(-0.05, 0.08))
    # keep the clothing change visible: skip the dead zone around 1.0
    mag = rng.uniform(0.08, 0.15)
    scale = 1.0 + mag if rng.random() < 0.5 else 1.0 - mag
    return BodyParams(h, lengths, radii, freq, phase0, bag, scale, int(seed))


def stride_length(params):
    _, _, thigh, shin, _, _ = params.limb_lengths
    return 2.0 * 0.95 * (thigh + shin) * math.sin(HIP_AMP)


def synth_skeleton(params, condition, t, fps=10.0):
    """Joint positions (17, 3) in meters at frame index t (may be
    fractional), plus the bag attachment point for BG (else None)."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    ua, la, thigh, shin, torso, head_r = params.limb_lengths
    phi = params.phase0 + 2.0 * math.pi * params.stride_freq_hz * (t / fps)
    speed = stride_length(params) * params.stride_freq_hz
    x = speed * (t / fps)
    pelvis_z = thigh + shin + FOOT_CLEARANCE + BOB_AMP * math.cos(2.0 * phi)

    hip_l = HIP_AMP * math.sin(phi)
    hip_r = HIP_AMP * math.sin(phi + math.pi)
    knee_l = KNEE_AMP * 0.5 * (1.0 - math.cos(phi - KNEE_PHASE))
    knee_r = KNEE_AMP * 0.5 * (1.0 - math.cos(phi + math.pi - KNEE_PHASE))
    sho_l = -ARM_AMP * math.sin(phi)
    sho_r = -ARM_AMP * math.sin(phi + math.pi)
    elb_l = ELBOW_AMP * 0.5 * (1.0 - math.cos(phi - ELBOW_PHASE))
    elb_r = ELBOW_AMP * 0.5 * (1.0 - math.cos(phi + math.pi - ELBOW_PHASE))

    hip_half = 0.26 * params.limb_radii[4] + 0.045
    sho_half = 0.80 * params.limb_radii[4] + 0.055

    jn = np.zeros((17, 3))
    jn[J["pelvis"]] = (x, 0.0, pelvis_z)
    jn[J["chest"]] = (x, 0.0, pelvis_z + 0.65 * torso)
    jn[J["neck"]] = (x, 0.0, pelvis_z + torso)
    jn[J["head_center"]] = (x, 0.0, pelvis_z + torso + 1.1 * head_r)
    jn[J["head_top"]] = (x, 0.0, pelvis_z + torso + 2.0 * head_r)

    def swing(origin, length, ang):
        return origin + length * np.array([math.sin(ang), 0.0, -math.cos(ang)])

    for side, hip_a, knee_a, sho_a, elb_a, sy in (
            ("l", hip_l, knee_l, sho_l, elb_l, 1.0),
            ("r", hip_r, knee_r, sho_r, elb_r, -1.0)):
        hip = jn[J["pelvis"]] + np.array([0.0, sy * hip_half, 0.0])
        knee = swing(hip, thigh, hip_a)
        ankle = swing(knee, shin, hip_a - knee_a)
        sho = jn[J["neck"]] + np.array([0.0, sy * sho_half, -0.02])
        elb = swing(sho, ua, sho_a)
        wri = swing(elb, la, sho_a + elb_a)
        jn[J[f"{side}_hip"]] = hip
        jn[J[f"{side}_knee"]] = knee
        jn[J[f"{side}_ankle"]] = ankle
        jn[J[f"{side}_shoulder"]] = sho
        jn[J[f"{side}_elbow"]] = elb
        jn[J[f"{side}_wrist"]] = wri

    attach = None
    if condition == "BG":
        attach = jn[J["chest"]] + np.asarray(params.bag_offset)
    return jn, attach


def _condition_geometry(params, condition, trial_rng):
    """Capsule radii plus the garment hem offset (meters the torso capsule
    extends below the pelvis; negative for tight/cropped clothing)."""
    r = np.array(params.limb_radii, dtype=np.float64)
    hem = 0.0
    if condition == "CL":
        # clothing covers limbs and torso, never the head; bulkier outfits
        # also hang lower over the hips
        r[:5] = r[:5] * params.clothing_scale
        r[:5] = r[:5] * (1.0 + 0.05 * trial_rng.uniform(-1.0, 1.0, size=5))
        hem = 0.9 * (params.clothing_scale - 1.0) * params.limb_lengths[4]
    return r, hem


_CAPSULE_SPEC = (
    ("torso", "pelvis", "neck", 4),
    ("head", "head_center", "head_top", 5),
    ("neck", "neck", "head_center", None),  # fixed thin link
    ("l_thigh", "l_hip", "l_knee", 2), ("r_thigh", "r_hip", "r_knee", 2),
    ("l_shin", "l_knee", "l_ankle", 3), ("r_shin", "r_knee", "r_ankle", 3),
    ("l_upper_arm", "l_shoulder", "l_elbow", 0),
    ("r_upper_arm", "r_shoulder", "r_elbow", 0),
    ("l_lower_arm", "l_elbow", "l_wrist", 1),
    ("r_lower_arm", "r_elbow", "r_wrist", 1),
)


def body_capsules(joints, radii, torso_hem=0.0):
    caps = np.zeros((len(_CAPSULE_SPEC), 7))
    for i, (name, a, b, ridx) in enumerate(_CAPSULE_SPEC):
        caps[i, 0:3] = joints[J[a]]
        caps[i, 3:6] = joints[J[b]]
        caps[i, 6] = 0.042 if ridx is None else radii[ridx]
        if name == "torso":
            caps[i, 2] -= torso_hem
    return caps


def _palette(params, condition):
    """Per-capsule albedo; CL redraws the clothing colors."""
    wardrobe = 1 if condition == "CL" else 0
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((params.seed, 7919, wardrobe))))
    shirt = rng.uniform(0.25, 0.95, size=3)
    pants = rng.uniform(0.20, 0.80, size=3)
    skin = np.array([0.85, 0.70, 0.58]) * rng.uniform(0.75, 1.05)
    bag = rng.uniform(0.25, 0.90, size=3)
    alb = np.zeros((len(_CAPSULE_SPEC) + 1, 3))
    for i, (name, _, _, _) in enumerate(_CAPSULE_SPEC):
        if name in ("torso", "l_upper_arm", "r_upper_arm"):
            alb[i] = shirt
        elif "thigh" in name or "shin" in name:
            alb[i] = pants
        else:
            alb[i] = skin
    alb[-1] = bag
    return np.clip(alb, 0.2, 0.95)


def _bag_box(params, attach):
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((params.seed, 104729))))
    half = np.array([rng.uniform(0.07, 0.11), rng.uniform(0.12, 0.16),
                     rng.uniform(0.18, 0.26)])
    lo = np.asarray(attach) - half
    return np.stack([lo, lo + 2 * half])


@dataclass(frozen=True)
class RenderConfig:
    pixel_pitch: float = 0.018
    render_w: int = 96
    render_h: int = 136
    window_top: float = 2.35  # world z of the image top edge
    fps: float = 10.0
    light: tuple = (0.4, -0.3, 0.85)
    ambient: float = 0.35
    floor_points: int = 400
    floor_radius: float = 2.5
    include_floor: bool = True
    lidar_range_noise: float = 0.008
    radar_noise: float = 0.05
    radar_min: int = 20
    radar_max: int = 80
    d_near: float = 0.0
    d_far: float = 1.5
    event_threshold: float = 0.1
    heatmap_sigma: float = 2.0


@dataclass
class MultiModalSample:
    meta_base: tuple  # (subject_id, view_deg, condition, trial)
    sequences: dict   # Modality -> GaitSequence
    joints2d: np.ndarray  # (T, 17, 2) pixel coords in the aligned 64x64 frame


def view_direction(view_deg):
    v = math.radians(view_deg)
    return np.array([-math.cos(v), -math.sin(v), 0.0])


def render_sample(params, view_deg, condition, trial, t_raw,
                  cfg=RenderConfig(), subject_id="0000",
                  trial_seed=0, sensor_seed=0,
                  modalities=tuple(core.Modality)):
    """Render one aligned multi-modal trial. trial_seed drives geometry
    noise shared by all views of the trial (CL jitter); sensor_seed drives
    per-view sensor noise (floor scatter, radar, lidar range jitter)."""
    if t_raw < 16:
        raise ValueError("t_raw must be >= 16")
    if (condition, trial) not in core.CONDITION_TRIALS:
        raise errors.InvalidTrial(f"{condition}-{trial:02d}")
    if view_deg not in core.VALID_VIEWS:
        raise errors.InvalidView(str(view_deg))

    trial_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((trial_seed, 13))))
    sensor_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((sensor_seed, 29))))
    radii, torso_hem = _condition_geometry(params, condition, trial_rng)
    albedos = _palette(params, condition)
    light = np.asarray(cfg.light, dtype=np.float64)
    light = light / np.linalg.norm(light)

    w = view_direction(view_deg)
    u = np.cross(w, np.array([0.0, 0.0, 1.0]))
    u /= np.linalg.norm(u)
    phase_shift = TRIAL_PHASE_STEP * (trial - 1)
    walk = BodyParams(params.height_m, params.limb_lengths, params.limb_radii,
                      params.stride_freq_hz,
                      (params.phase0 + phase_shift) % (2.0 * math.pi),
                      params.bag_offset, params.clothing_scale, params.seed)

    hr, wr, pitch = cfg.render_h, cfg.render_w, cfg.pixel_pitch
    v_top = cfg.window_top
    masks, rgbs, irs, clouds = [], [], [], []
    joints_px = []
    for t in range(t_raw):
        joints, attach = synth_skeleton(walk, condition, t, cfg.fps)
        caps = body_capsules(joints, radii, torso_hem)
        box = _bag_box(params, attach) if condition == "BG" else None
        root = joints[J["pelvis"]]
        u_left = root @ u - (wr * pitch) / 2.0
        corner = u * u_left + np.array([0.0, 0.0, v_top]) + w * (root @ w - 3.0)
        depth, prim, normal = raycast(corner, u * pitch,
                                      np.array([0.0, 0.0, -pitch]),
                                      (hr, wr), w, caps, box)
        mask = prim >= 0
        if not mask.any():
            raise errors.EmptyRender(
                f"subject left the frustum at frame {t} (view {view_deg})")
        lam = np.clip((normal * light).sum(axis=-1), 0.0, 1.0)
        shade = np.where(mask, cfg.ambient + (1.0 - cfg.ambient) * lam, 0.0)
        alb = albedos[np.clip(prim, 0, albedos.shape[0] - 1)]
        rgbs.append(np.where(mask[None], alb.transpose(2, 0, 1) * shade[None], 0.0))
        irs.append(np.where(mask, 0.85 * shade, 0.0))
        masks.append(mask)

        ii, jj = np.nonzero(mask)
        t_hit = depth[ii, jj]
        origins = (corner[None, :] + (jj[:, None] + 0.5) * (u * pitch)[None, :]
                   + (ii[:, None] + 0.5) * np.array([0.0, 0.0, -pitch])[None, :])
        clouds.append(origins + t_hit[:, None] * w[None, :])

        jpx = np.stack([(joints @ u - u_left) / pitch - 0.5,
                        (v_top - joints[:, 2]) / pitch - 0.5], axis=1)
        joints_px.append(jpx)

    # one alignment per frame, computed from the silhouette and shared by
    # every image modality so masks stay pixel-identical
    aligns = [preprocess.compute_alignment(m) for m in masks]
    sil64 = np.stack([preprocess.apply_alignment(m[None].astype(np.float64), m, a)
                      for m, a in zip(masks, aligns)]).astype(np.float32)
    rgb64 = np.stack([preprocess.apply_alignment(f, m, a)
                      for f, m, a in zip(rgbs, masks, aligns)]).astype(np.float32)
    ir64g = np.stack([preprocess.apply_alignment(f[None], m, a)
                      for f, m, a in zip(irs, masks, aligns)]).astype(np.float32)
    ir64 = np.repeat(ir64g, 3, axis=1)

    joints2d = np.zeros((t_raw, 17, 2), dtype=np.float32)
    for t, (jpx, a) in enumerate(zip(joints_px, aligns)):
        r0, r1, c0, c1, out_w = a
        sx = out_w / (c1 - c0)
        sy = preprocess.OUT_SIZE / (r1 - r0)
        col = (jpx[:, 0] - c0 + 0.5) * sx - 0.5
        row = (jpx[:, 1] - r0 + 0.5) * sy - 0.5
        start = preprocess.alignment_offset(masks[t], a)
        joints2d[t] = np.stack([col + start, row], axis=1)

    proj = preprocess.ProjectionConfig(axis=tuple(w), pixel_pitch=pitch,
                                       d_near=cfg.d_near, d_far=cfg.d_far)
    want = set(modalities)
    seqs = {}

    def put(mod, frames):
        if mod in want:
            meta = core.SequenceMeta(subject_id, view_deg, condition, trial, mod)
            seqs[mod] = core.GaitSequence(meta, frames)

    put(core.Modality.RGB_SILHOUETTE, sil64)
    put(core.Modality.RGB, rgb64)
    put(core.Modality.IR, ir64)
    # the IR sensor sees the same geometry; its silhouette differs from the
    # RGB one only through sensor noise, which we keep at zero
    put(core.Modality.IR_SILHOUETTE, sil64.copy())
    if core.Modality.EVENT in want:
        put(core.Modality.EVENT, preprocess.simulate_events(
            rgb64, cfg.event_threshold))
    if core.Modality.POSE2D_HEATMAP in want:
        put(core.Modality.POSE2D_HEATMAP, preprocess.pose_to_heatmaps(
            joints2d / preprocess.OUT_SIZE, cfg.heatmap_sigma))
    if core.Modality.DEPTH in want:
        put(core.Modality.DEPTH,
            np.stack([preprocess.project_depth(c, proj) for c in clouds]))
    if core.Modality.LIDAR_PROJ_DEPTH in want or core.Modality.LIDAR_POINTS in want:
        noisy = [c + (sensor_rng.normal(0.0, cfg.lidar_range_noise,
                                        size=c.shape[0])[:, None] * w[None, :])
                 for c in clouds]
        if core.Modality.LIDAR_PROJ_DEPTH in want:
            put(core.Modality.LIDAR_PROJ_DEPTH,
                np.stack([preprocess.project_depth(c, proj) for c in noisy]))
        if core.Modality.LIDAR_POINTS in want:
            stored = []
            for c in noisy:
                if cfg.include_floor:
                    root_xy = c[:, :2].mean(axis=0)
                    ang = sensor_rng.uniform(0, 2 * math.pi, cfg.floor_points)
                    rad = cfg.floor_radius * np.sqrt(
                        sensor_rng.uniform(0, 1, cfg.floor_points))
                    floor = np.stack([root_xy[0] + rad * np.cos(ang),
                                      root_xy[1] + rad * np.sin(ang),
                                      sensor_rng.uniform(0.0, 0.045,
                                                         cfg.floor_points)], axis=1)
                    stored.append(np.concatenate([c, floor]).astype(np.float32))
                else:
                    stored.append(c.astype(np.float32))
            put(core.Modality.LIDAR_POINTS, stored)
    if core.Modality.RADAR_POINTS in want or core.Modality.RADAR_PROJ_DEPTH in want:
        radar = []
        for c in clouds:
            n = int(sensor_rng.integers(cfg.radar_min, cfg.radar_max + 1))
            n = min(n, c.shape[0])
            idx = sensor_rng.choice(c.shape[0], size=n, replace=False)
            pts = c[idx] + sensor_rng.normal(0.0, cfg.radar_noise, size=(n, 3))
            radar.append(pts.astype(np.float32))
        if core.Modality.RADAR_POINTS in want:
            put(core.Modality.RADAR_POINTS, radar)
        if core.Modality.RADAR_PROJ_DEPTH in want:
            put(core.Modality.RADAR_PROJ_DEPTH,
                np.stack([preprocess.project_depth(p, proj) for p in radar]))

    return MultiModalSample((subject_id, view_deg, condition, trial),
                            seqs, joints2d)


@dataclass(frozen=True)
class GenConfig:
    n_train_subjects: int
    n_test_subjects: int
    views: tuple
    t_raw: int = 24
    seed: int = 0
    modalities: tuple = tuple(core.Modality)
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.n_train_subjects < 1 or self.n_test_subjects < 1:
            raise ValueError("subject counts must be >= 1")
        for v in self.views:
            if v not in core.VALID_VIEWS:
                raise errors.InvalidView(str(v))


TRIALS = (("NM", 1), ("NM", 2), ("BG", 1), ("CL", 1))


def generate_dataset(cfg, out_root):
    """Write the full synthetic tree (sequences, joints2d, splits.json,
    manifest.tsv) and return the manifest. Bit-reproducible from cfg."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    n_total = cfg.n_train_subjects + cfg.n_test_subjects
    subject_ids = [f"{i + 1:04d}" for i in range(n_total)]
    train_ids = subject_ids[:cfg.n_train_subjects]
    test_ids = subject_ids[cfg.n_train_subjects:]

    for idx, sid in enumerate(subject_ids):
        params = sample_identity(cfg.seed * 100003 + idx)
        for cond, trial in TRIALS:
            tseed = _entropy(cfg.seed, idx, cond, trial, 0)
            for view in cfg.views:
                sseed = _entropy(cfg.seed, idx, cond, trial, view + 1)
                sample = render_sample(params, view, cond, trial, cfg.t_raw,
                                       cfg.render, subject_id=sid,
                                       trial_seed=tseed, sensor_seed=sseed,
                                       modalities=cfg.modalities)
                try:
                    for seq in sample.sequences.values():
                        core.save_sequence(out_root, seq)
                    view_dir = out_root / sid / f"{cond}-{trial:02d}" / f"{view:03d}"
                    view_dir.mkdir(parents=True, exist_ok=True)
                    (view_dir / "joints2d.json").write_text(json.dumps(
                        np.round(sample.joints2d, 4).tolist()) + "\n",
                        encoding="utf-8")
                except OSError as exc:
                    raise errors.DiskWriteError(str(exc)) from exc
        log.info("generated subject %s (%d/%d)", sid, idx + 1, n_total)

    core.write_splits(out_root, train_ids, test_ids)
    manifest = core.scan_manifest(out_root)
    core.write_manifest(manifest, out_root / "manifest.tsv")
    return manifest


def _entropy(*parts):
    """Stable small integer from mixed ints/strings for SeedSequence."""
    acc = 0
    for p in parts:
        if isinstance(p, str):
            p = sum((i + 1) * b for i, b in enumerate(p.encode()))
        acc = (acc * 1000003 + int(p) + 1) % (2 ** 31 - 1)
    return acc
