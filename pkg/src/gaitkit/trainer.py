"""PK batch sampling, multi-modal batch composition, the SGD loop, and the
checkpoint container.

Checkpoint format: b"GKC1", uint32 header length, UTF-8 JSON header
(version, model config, step, RNG state, ordered array directory), then the
raw little-endian array payloads in directory order. Loading rebuilds the
model from the stored config and fails loudly on any missing/extra/
mis-shaped entry.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core, errors, losses
from .core import Modality
from .model import GaitNet, OmniGaitConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"GKC1"


@dataclass(frozen=True)
class BatchSpec:
    p: int = 8
    k: int = 4
    t: int = 16

    def __post_init__(self):
        if self.p < 2 or self.k < 2 or self.t < 1:
            raise ValueError("need p >= 2, k >= 2, t >= 1")


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 3000
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = ()
    seed: int = 0
    anchor: Modality = Modality.RGB_SILHOUETTE
    batch: BatchSpec = field(default_factory=BatchSpec)
    margin: float = losses.DEFAULT_MARGIN
    checkpoint_every: int = 1000
    log_every: int = 25

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")

    def lr_at(self, step):
        drops = sum(1 for m in self.lr_milestones if step >= m)
        return self.base_lr * (0.1 ** drops)


@dataclass(frozen=True)
class BatchItem:
    trial_key: tuple   # (subject_id, view_deg, condition, trial)
    start: int
    label: int


def pk_sample(manifest, spec, rng, label_of=None):
    """p distinct identities, k trials each (with replacement when a subject
    has fewer), plus a uniform frame-window start per pick."""
    groups = {}
    counts = {}
    for e in manifest.entries:
        tk = e.meta.trial_key
        groups.setdefault(e.meta.subject_id, set()).add(tk)
        counts[tk] = min(counts.get(tk, e.frame_count), e.frame_count)
    subjects = sorted(groups)
    if len(subjects) < spec.p:
        raise errors.TooFewIdentities(
            f"need {spec.p} identities, manifest has {len(subjects)}")
    if label_of is None:
        label_of = {s: i for i, s in enumerate(subjects)}
    chosen = rng.choice(len(subjects), size=spec.p, replace=False)
    batch = []
    for si in chosen:
        sid = subjects[si]
        trials = sorted(groups[sid])
        if len(trials) >= spec.k:
            picks = rng.choice(len(trials), size=spec.k, replace=False)
        else:
            picks = rng.integers(0, len(trials), size=spec.k)
        for ti in picks:
            tk = trials[ti]
            hi = max(0, counts[tk] - spec.t)
            start = int(rng.integers(0, hi + 1))
            batch.append(BatchItem(tk, start, label_of[sid]))
    return batch


class SequenceCache:
    """Quantized in-memory cache of decoded sequences (uint8, as stored)."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache = {}

    def frames(self, trial_key, modality):
        key = (trial_key, modality)
        if key not in self._cache:
            sid, view, cond, trial = trial_key
            meta = core.SequenceMeta(sid, view, cond, trial, modality)
            try:
                seq = core.load_sequence(self.root, meta)
            except FileNotFoundError as exc:
                raise errors.MissingModality(meta.key) from exc
            self._cache[key] = np.clip(
                np.rint(seq.frames * 255), 0, 255).astype(np.uint8)
        return self._cache[key]


def compose_omni_batch(cache, items, modality_set, t):
    """Aligned modality stacks for each batch item; every stream shares the
    same label vector. Windows are ordered and loop-padded."""
    missing = []
    for item in items:
        for m in modality_set:
            d = core.sequence_dir(cache.root, core.SequenceMeta(
                item.trial_key[0], item.trial_key[1], item.trial_key[2],
                item.trial_key[3], m))
            if not (d / "meta.json").exists():
                missing.append(f"{d}")
    if missing:
        raise errors.MissingModality("; ".join(missing[:5]))
    out = {}
    for m in modality_set:
        stacks = []
        for item in items:
            frames = cache.frames(item.trial_key, m)
            idx = (item.start + np.arange(t)) % frames.shape[0]
            stacks.append(frames[idx])
        out[m] = np.stack(stacks).astype(np.float32) / 255.0
    labels = np.array([item.label for item in items], dtype=np.int64)
    return out, labels


class SGD:
    """Momentum gradient descent with decoupled-from-nothing classic L2."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4):
        self.params = params  # dict name -> Param
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        for k, p in self.params.items():
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.data.dtype, copy=False)

    def grad_norm(self):
        total = 0.0
        for p in self.params.values():
            total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def state_arrays(self):
        return {f"optim.{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays):
        for k in self.velocity:
            name = f"optim.{k}"
            if name not in arrays:
                raise errors.CorruptCheckpoint(f"missing optimizer entry {name}")
            if arrays[name].shape != self.velocity[k].shape:
                raise errors.CorruptCheckpoint(f"optimizer shape clash at {name}")
            self.velocity[k][...] = arrays[name]


def train_step(model, inputs, labels, optimizer, cfg):
    """One optimization step over the jointly batched streams."""
    if model.config.variant == "omni":
        streams = model.forward_training(inputs, anchor=cfg.anchor)
        feats = {n: pre for n, (pre, _, _) in streams.items()}
        logits = {n: lg for n, (_, _, lg) in streams.items()}
        report, d_pre, d_logits = losses.omni_objective_with_grads(
            feats, logits, labels, cfg.margin)
    else:
        streams = model.forward_training(inputs, anchor=None)
        feats = {n: pre for n, (pre, _, _) in streams.items()}
        logits = {n: lg for n, (_, _, lg) in streams.items()}
        report, d_pre, d_logits = losses.two_stream_objective_with_grads(
            feats, logits, labels, cfg.margin)
    if not np.isfinite(report.total):
        bad = {n: v for n, v in report.streams.items()
               if not all(np.isfinite(list(v.values())))}
        raise errors.NonFiniteLoss(f"total={report.total} streams={bad}")
    model.zero_grad()
    model.backward_training({n: g.astype(model.dtype) for n, g in d_pre.items()},
                            {n: g.astype(model.dtype) for n, g in d_logits.items()})
    optimizer.step()
    return report


def fit(model, manifest, root, cfg, out_dir, resume_from=None):
    """Run cfg.total_iterations PK-sampled steps; returns the final
    checkpoint path. Fully reproducible from cfg.seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = manifest.subjects()
    label_of = {s: i for i, s in enumerate(subjects)}
    cache = SequenceCache(root)
    optimizer = SGD(model.named_params(), cfg.lr_at(1), cfg.momentum,
                    cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((cfg.seed, 424243))))
    start_step = 0
    if resume_from is not None:
        loaded, optimizer, start_step, rng_state = load_checkpoint(
            resume_from, expect_config=model.config)
        model.load_state(loaded.state())
        optimizer = _rebind_optimizer(optimizer, model, cfg)
        rng.bit_generator.state = rng_state
        log.info("resumed from %s at step %d", resume_from, start_step)
    log_path = out_dir / "train_log.tsv"
    mode = "a" if resume_from is not None else "w"
    with open(log_path, mode, encoding="utf-8") as logf:
        if mode == "w":
            logf.write("step\tlr\ttotal\tce\ttriplet\tcross_triplet\tgrad_norm\n")
        for step in range(start_step + 1, cfg.total_iterations + 1):
            optimizer.lr = cfg.lr_at(step)
            items = pk_sample(manifest, cfg.batch, rng, label_of)
            inputs, labels = compose_omni_batch(
                cache, items, model.config.modalities, cfg.batch.t)
            report = train_step(model, inputs, labels, optimizer, cfg)
            gnorm = optimizer.grad_norm()
            logf.write("\t".join((str(step), f"{optimizer.lr:.6g}")
                                 + report.as_tsv_fields()
                                 + (f"{gnorm:.6f}",)) + "\n")
            if step % cfg.log_every == 0 or step == 1:
                logf.flush()
                log.info("step %d lr %.4g loss %.4f (nonzero-trip %.2f)",
                         step, optimizer.lr, report.total,
                         report.nonzero_triplet_fraction)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 \
                    and step < cfg.total_iterations:
                save_checkpoint(out_dir / f"ckpt_{step:06d}.gkpt", model,
                                optimizer, step, rng.bit_generator.state)
    final = out_dir / "final.gkpt"
    save_checkpoint(final, model, optimizer, cfg.total_iterations, rng.bit_generator.state)
    return final


def _rebind_optimizer(loaded_opt, model, cfg):
    opt = SGD(model.named_params(), cfg.base_lr, cfg.momentum, cfg.weight_decay)
    for k in opt.velocity:
        opt.velocity[k][...] = loaded_opt.velocity[k]
    return opt


# --- checkpoint container ------------------------------------------------------


def save_checkpoint(path, model, optimizer, step, rng_state=None):
    arrays = dict(model.state())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    names = sorted(arrays)
    directory = [{"name": n, "dtype": arrays[n].dtype.str,
                  "shape": list(arrays[n].shape)} for n in names]
    header = {
        "version": 1,
        "config": model.config.to_dict(),
        "step": int(step),
        "rng": _encode_rng(rng_state),
        "has_optimizer": optimizer is not None,
        "arrays": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for n in names:
                arr = arrays[n]
                f.write(np.ascontiguousarray(
                    arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    except OSError as exc:
        raise errors.DiskWriteError(str(exc)) from exc
    return path


def load_checkpoint(path, expect_config=None, dtype=np.float32):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise errors.CorruptCheckpoint(f"bad magic in {path}")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise errors.CorruptCheckpoint(f"unreadable header: {exc}") from exc
    config = OmniGaitConfig.from_dict(header["config"])
    if expect_config is not None and config != expect_config:
        raise errors.ConfigMismatch(
            f"checkpoint config {config} != expected {expect_config}")
    arrays = {}
    off = 8 + hlen
    for ent in header["arrays"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        dt = np.dtype(ent["dtype"])
        nbytes = n * dt.itemsize
        if off + nbytes > len(raw):
            raise errors.CorruptCheckpoint(
                f"truncated payload at {ent['name']}")
        arrays[ent["name"]] = np.frombuffer(
            raw, dtype=dt, count=n, offset=off).reshape(ent["shape"]).copy()
        off += nbytes
    if off != len(raw):
        raise errors.CorruptCheckpoint("trailing bytes after payload")
    model = GaitNet(config, dtype=dtype)
    model_state = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    model.load_state(model_state)
    optimizer = None
    if header.get("has_optimizer"):
        optimizer = SGD(model.named_params(), 0.0)
        optimizer.load_state_arrays(
            {k: v for k, v in arrays.items() if k.startswith("optim.")})
    return model, optimizer, int(header["step"]), _decode_rng(header.get("rng"))


def _encode_rng(state):
    if state is None:
        return None
    return json.loads(json.dumps(state))


def _decode_rng(obj):
    return obj
