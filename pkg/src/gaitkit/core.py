"""Domain types, the sequence key grammar, and on-disk persistence.

Dataset layout (one sequence per leaf directory):

    <root>/<subject>/<COND>-<NN>/<VVV>/<modality>/
        meta.json                   frame count + channel info
        000.png 001.png ...         image modalities, 8-bit L/LA/RGB
        frames.pcf                  point modalities, PCF1 container

Keys are "<subject>/<COND>-<NN>/<VVV>/<modality>", e.g.
"0001/NM-01/000/rgb_silhouette". The manifest is a tab-separated text index
(key, relative_path, frame_count), one line per sequence, sorted by key.
"""

import io
import json
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from . import errors

log = logging.getLogger(__name__)

VALID_VIEWS = tuple(range(0, 360, 36))
CONDITION_TRIALS = {("NM", 1), ("NM", 2), ("BG", 1), ("CL", 1)}
CONDITIONS = ("NM", "BG", "CL")


class Modality(Enum):
    RGB = "rgb"
    RGB_SILHOUETTE = "rgb_silhouette"
    POSE2D_HEATMAP = "pose2d_heatmap"
    EVENT = "event"
    IR = "ir"
    IR_SILHOUETTE = "ir_silhouette"
    DEPTH = "depth"
    LIDAR_POINTS = "lidar_points"
    LIDAR_PROJ_DEPTH = "lidar_proj_depth"
    RADAR_POINTS = "radar_points"
    RADAR_PROJ_DEPTH = "radar_proj_depth"

    @property
    def is_image(self):
        return self not in (Modality.LIDAR_POINTS, Modality.RADAR_POINTS)

    @property
    def channels(self):
        if not self.is_image:
            raise errors.UnsupportedModality(f"{self.name} is not image-based")
        return _CHANNELS[self]


_CHANNELS = {
    Modality.RGB: 3,
    Modality.RGB_SILHOUETTE: 1,
    Modality.POSE2D_HEATMAP: 2,
    Modality.EVENT: 3,
    Modality.IR: 3,
    Modality.IR_SILHOUETTE: 1,
    Modality.DEPTH: 3,
    Modality.LIDAR_PROJ_DEPTH: 3,
    Modality.RADAR_PROJ_DEPTH: 3,
}

IMAGE_MODALITIES = tuple(m for m in Modality if m.is_image)
POINT_MODALITIES = (Modality.LIDAR_POINTS, Modality.RADAR_POINTS)
IMAGE_SIZE = 64


@dataclass(frozen=True)
class SequenceMeta:
    subject_id: str
    view_deg: int
    condition: str
    trial: int
    modality: Modality

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise errors.InvalidCondition(self.condition)
        if self.view_deg % 36 != 0 or not (0 <= self.view_deg < 360):
            raise errors.InvalidView(str(self.view_deg))
        if (self.condition, self.trial) not in CONDITION_TRIALS:
            raise errors.InvalidTrial(f"{self.condition}-{self.trial:02d}")

    @property
    def key(self):
        return format_sequence_key(self)

    @property
    def trial_key(self):
        """Identity of the underlying recording, modality stripped."""
        return (self.subject_id, self.view_deg, self.condition, self.trial)

    def with_modality(self, modality):
        return SequenceMeta(self.subject_id, self.view_deg, self.condition,
                            self.trial, modality)


def parse_sequence_key(key):
    parts = key.split("/")
    if len(parts) != 4 or any(not p for p in parts):
        raise errors.MalformedKey(key)
    subject, cond_trial, view_s, mod_s = parts
    if "-" not in cond_trial:
        raise errors.MalformedKey(key)
    cond, _, trial_s = cond_trial.partition("-")
    if cond not in CONDITIONS:
        raise errors.InvalidCondition(cond)
    if len(trial_s) != 2 or not trial_s.isdigit():
        raise errors.MalformedKey(key)
    trial = int(trial_s)
    if len(view_s) != 3 or not view_s.isdigit():
        raise errors.MalformedKey(key)
    view = int(view_s)
    if view % 36 != 0 or not (0 <= view < 360):
        raise errors.InvalidView(view_s)
    try:
        modality = Modality(mod_s)
    except ValueError:
        raise errors.UnknownModality(mod_s) from None
    if (cond, trial) not in CONDITION_TRIALS:
        raise errors.InvalidTrial(cond_trial)
    return SequenceMeta(subject, view, cond, trial, modality)


def format_sequence_key(meta):
    return (f"{meta.subject_id}/{meta.condition}-{meta.trial:02d}/"
            f"{meta.view_deg:03d}/{meta.modality.value}")


@dataclass
class GaitSequence:
    meta: SequenceMeta
    frames: object  # (T, C, H, W) float array or list of (N_t, 3) float arrays

    def __post_init__(self):
        if self.meta.modality.is_image:
            f = self.frames
            if f.ndim != 4 or f.shape[0] < 1:
                raise errors.ShapeMismatch(f"image stack has shape {f.shape}")
            if f.shape[1] != self.meta.modality.channels:
                raise errors.ShapeMismatch(
                    f"{self.meta.modality.name} expects "
                    f"{self.meta.modality.channels} channels, got {f.shape[1]}")
            if not np.isfinite(f).all():
                raise errors.ShapeMismatch("non-finite image values")
        else:
            if len(self.frames) < 1:
                raise errors.ShapeMismatch("empty point sequence")
            for p in self.frames:
                if p.ndim != 2 or p.shape[1] != 3 or not np.isfinite(p).all():
                    raise errors.ShapeMismatch("bad point frame")

    @property
    def frame_count(self):
        return len(self.frames)


@dataclass(frozen=True)
class ManifestEntry:
    meta: SequenceMeta
    relative_path: str
    frame_count: int


@dataclass
class Manifest:
    root_path: str
    entries: list

    def __len__(self):
        return len(self.entries)

    def subjects(self):
        return sorted({e.meta.subject_id for e in self.entries})

    def filter(self, subjects=None, modality=None, condition=None, trial=None):
        out = []
        for e in self.entries:
            m = e.meta
            if subjects is not None and m.subject_id not in subjects:
                continue
            if modality is not None and m.modality is not modality:
                continue
            if condition is not None and m.condition != condition:
                continue
            if trial is not None and m.trial != trial:
                continue
            out.append(e)
        return Manifest(self.root_path, out)

    def by_key(self):
        return {e.meta.key: e for e in self.entries}


# --- frame files ---------------------------------------------------------

_PIL_MODES = {1: "L", 2: "LA", 3: "RGB"}


def save_image_frames(seq_dir, frames):
    """frames: (T, C, H, W) in [0, 1]; stored as 8-bit PNGs."""
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    t, c = frames.shape[0], frames.shape[1]
    mode = _PIL_MODES[c]
    q = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    for i in range(t):
        arr = q[i, 0] if c == 1 else q[i].transpose(1, 2, 0)
        Image.fromarray(arr, mode=mode).save(seq_dir / f"{i:03d}.png")
    _write_meta(seq_dir, {"frame_count": t, "channels": c, "kind": "image"})


def load_image_frames(seq_dir):
    seq_dir = Path(seq_dir)
    meta = _read_meta(seq_dir)
    t, c = meta["frame_count"], meta["channels"]
    out = np.empty((t, c, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i in range(t):
        with Image.open(seq_dir / f"{i:03d}.png") as im:
            arr = np.asarray(im, dtype=np.float32) / 255.0
        out[i] = arr[None] if c == 1 else arr.transpose(2, 0, 1)
    return out


PCF_MAGIC = b"PCF1"


def save_point_frames(seq_dir, frames):
    """frames: list of (N_t, 3) float arrays, written as the PCF1 container:
    magic, uint32 frame count, then per frame uint32 count + float32 xyz."""
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    buf.write(PCF_MAGIC)
    buf.write(struct.pack("<I", len(frames)))
    for pts in frames:
        pts32 = np.ascontiguousarray(pts, dtype="<f4")
        buf.write(struct.pack("<I", pts32.shape[0]))
        buf.write(pts32.tobytes())
    (seq_dir / "frames.pcf").write_bytes(buf.getvalue())
    _write_meta(seq_dir, {"frame_count": len(frames), "kind": "points"})


def load_point_frames(seq_dir):
    raw = (Path(seq_dir) / "frames.pcf").read_bytes()
    if raw[:4] != PCF_MAGIC:
        raise errors.CorruptCheckpoint(f"bad PCF magic in {seq_dir}")
    off = 4
    (t,) = struct.unpack_from("<I", raw, off)
    off += 4
    frames = []
    for _ in range(t):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        pts = np.frombuffer(raw, dtype="<f4", count=n * 3, offset=off)
        off += n * 12
        frames.append(pts.reshape(n, 3).copy())
    return frames


def _write_meta(seq_dir, payload):
    (Path(seq_dir) / "meta.json").write_text(
        json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def _read_meta(seq_dir):
    return json.loads((Path(seq_dir) / "meta.json").read_text(encoding="utf-8"))


def sequence_dir(root, meta):
    return Path(root) / meta.key


def save_sequence(root, seq):
    d = sequence_dir(root, seq.meta)
    if seq.meta.modality.is_image:
        save_image_frames(d, seq.frames)
    else:
        save_point_frames(d, seq.frames)
    return d


def load_sequence(root, meta):
    d = sequence_dir(root, meta)
    if meta.modality.is_image:
        return GaitSequence(meta, load_image_frames(d))
    return GaitSequence(meta, load_point_frames(d))


# --- manifest --------------------------------------------------------------


def scan_manifest(root):
    """Walk the tree, collect every parseable sequence directory. Malformed
    entries are logged and skipped; duplicate keys are fatal."""
    root = Path(root)
    if not root.is_dir():
        raise errors.RootNotFound(str(root))
    entries = {}
    for meta_file in sorted(root.rglob("meta.json")):
        seq_dir = meta_file.parent
        rel = seq_dir.relative_to(root).as_posix()
        try:
            meta = parse_sequence_key(rel)
        except errors.GaitError as exc:
            log.warning("skipping %s: %s", rel, exc)
            continue
        payload = _read_meta(seq_dir)
        count = int(payload["frame_count"])
        if count < 1:
            log.warning("skipping %s: empty sequence", rel)
            continue
        if meta.key in entries:
            raise errors.DuplicateKey(meta.key)
        entries[meta.key] = ManifestEntry(meta, rel, count)
    ordered = [entries[k] for k in sorted(entries)]
    return Manifest(str(root), ordered)


def write_manifest(manifest, path):
    lines = [f"{e.meta.key}\t{e.relative_path}\t{e.frame_count}"
             for e in sorted(manifest.entries, key=lambda e: e.meta.key)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")


def read_manifest(path, root=None):
    path = Path(path)
    root = str(root if root is not None else path.parent)
    entries = []
    seen = set()
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, rel, count = line.split("\t")
        if key in seen:
            raise errors.DuplicateKey(key)
        seen.add(key)
        entries.append(ManifestEntry(parse_sequence_key(key), rel, int(count)))
    return Manifest(root, entries)


def read_splits(root):
    """splits.json maps 'train'/'test' to subject id lists."""
    return json.loads((Path(root) / "splits.json").read_text(encoding="utf-8"))


def write_splits(root, train_ids, test_ids):
    payload = {"train": sorted(train_ids), "test": sorted(test_ids)}
    (Path(root) / "splits.json").write_text(
        json.dumps(payload, indent=1) + "\n", encoding="utf-8")
