"""Gallery/probe protocol construction and Rank-1 / mAP evaluation with
cross-view averaging.

Protocol: NM-01 sequences form the gallery; NM-02, BG-01, CL-01 are the
probes, reported per condition. Metrics are computed per (probe view,
gallery view) pair, same-view pairs excluded, then averaged over the
evaluated cells. MULTI mode pairs two modalities of the same recording and
embeds them through the fusion path.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core, errors
from .core import Modality

log = logging.getLogger(__name__)

GALLERY_TRIAL = ("NM", 1)
PROBE_TRIALS = {"NM": ("NM", 2), "BG": ("BG", 1), "CL": ("CL", 1)}
CONDITIONS = ("NM", "BG", "CL")
MODES = ("single", "cross", "multi")


@dataclass(frozen=True)
class ProtocolSpec:
    mode: str
    gallery_modality: tuple  # 1 modality, or 2 for multi
    probe_modality: tuple

    def __post_init__(self):
        if self.mode not in MODES:
            raise errors.ProtocolError(f"unknown mode {self.mode}")
        g = _as_mod_tuple(self.gallery_modality)
        p = _as_mod_tuple(self.probe_modality)
        want = 2 if self.mode == "multi" else 1
        if len(g) != want or len(p) != want:
            raise errors.ProtocolError(
                f"{self.mode} mode needs {want} modality(ies) per side")
        if self.mode == "cross" and g == p:
            raise errors.ProtocolError(
                "cross mode requires distinct gallery/probe modalities")
        if self.mode == "single" and g != p:
            raise errors.ProtocolError("single mode requires equal modalities")
        object.__setattr__(self, "gallery_modality", g)
        object.__setattr__(self, "probe_modality", p)

    def needed_modalities(self):
        return set(self.gallery_modality) | set(self.probe_modality)


def _as_mod_tuple(v):
    if isinstance(v, Modality):
        return (v,)
    return tuple(v)


@dataclass
class EmbeddingRecord:
    subject_id: str
    view_deg: int
    condition: str
    trial: int
    modality_tag: str
    feature: np.ndarray  # (C3, P)


@dataclass
class EvalReport:
    conditions: dict           # name -> {"rank1": %, "mAP": %}
    matrices: dict             # (condition, metric) -> 10x10 array with NaN
    skipped_pairs: int = 0     # multi-mode probes lacking a partner
    views: tuple = ()

    def summary_lines(self):
        out = []
        for cond in CONDITIONS:
            if cond in self.conditions:
                c = self.conditions[cond]
                out.append(f"{cond}: Rank-1 {c['rank1']:6.2f}%  "
                           f"mAP {c['mAP']:6.2f}%")
        if self.skipped_pairs:
            out.append(f"skipped unpaired probes: {self.skipped_pairs}")
        return out


def build_protocol(manifest, spec):
    """Select gallery / per-condition probe entry groups from a test-split
    manifest. Returns (gallery, probes, skipped) where each element of a
    group is a tuple of ManifestEntries (length 1, or 2 in multi mode)."""
    def select(mods, cond, trial):
        rows = {}
        for e in manifest.entries:
            if (e.meta.condition, e.meta.trial) != (cond, trial):
                continue
            if e.meta.modality not in mods:
                continue
            rows.setdefault(e.meta.trial_key, {})[e.meta.modality] = e
        groups = []
        skipped = 0
        for tk in sorted(rows):
            have = rows[tk]
            if len(have) == len(mods):
                groups.append(tuple(have[m] for m in mods))
            else:
                skipped += 1
        return groups, skipped

    gallery, g_skip = select(spec.gallery_modality, *GALLERY_TRIAL)
    if not gallery:
        raise errors.EmptyGallery(
            f"no NM-01 sequences for {[m.value for m in spec.gallery_modality]}")
    probes = {}
    skipped = g_skip
    for cond, (c, t) in PROBE_TRIALS.items():
        probes[cond], s = select(spec.probe_modality, c, t)
        skipped += s
    return gallery, probes, skipped


def distance(a, b):
    """Mean over parts of the per-part Euclidean distance."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise errors.ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=0).mean())


def distance_matrix(probe_feats, gallery_feats):
    diff = probe_feats[:, None] - gallery_feats[None, :]
    return np.sqrt((diff ** 2).sum(axis=2)).mean(axis=2)


def rank1_view_pair(gallery, probes):
    """gallery/probes: (subject_ids, features). Percentage of probes whose
    nearest gallery entry (ties -> lowest index) shares the subject."""
    g_ids, g_feats = gallery
    p_ids, p_feats = probes
    d = distance_matrix(p_feats, g_feats)
    nearest = d.argmin(axis=1)  # first minimum: deterministic tie-break
    hits = sum(1 for i, j in enumerate(nearest) if p_ids[i] == g_ids[j])
    return 100.0 * hits / len(p_ids)


def mean_ap_view_pair(gallery, probes):
    """mAP over probes; probes without any same-subject gallery entry are
    excluded and counted."""
    g_ids, g_feats = gallery
    p_ids, p_feats = probes
    d = distance_matrix(p_feats, g_feats)
    aps = []
    excluded = 0
    g_ids_arr = np.asarray(g_ids)
    for i in range(len(p_ids)):
        order = np.argsort(d[i], kind="stable")
        rel = (g_ids_arr[order] == p_ids[i])
        n_rel = int(rel.sum())
        if n_rel == 0:
            excluded += 1
            continue
        cum = np.cumsum(rel)
        precision_at = cum[rel] / (np.flatnonzero(rel) + 1)
        aps.append(precision_at.sum() / n_rel)
    if not aps:
        return float("nan"), excluded
    return 100.0 * float(np.mean(aps)), excluded


def cross_view_average(matrix):
    """Mean over evaluated off-diagonal cells (NaN = missing/skipped)."""
    m = np.asarray(matrix, dtype=np.float64)
    mask = ~np.isnan(m)
    np.fill_diagonal(mask, False)
    if not mask.any():
        raise errors.AllPairsMissing("no off-diagonal cells evaluated")
    return float(m[mask].mean())


def _window(frames, t):
    idx = np.arange(t) % frames.shape[0]
    return frames[idx]


def extract_embeddings(model, root, groups, modalities, t=None, batch=24):
    """Embed each group (tuple of entries, aligned by trial) through
    forward_single or forward_pair, batched for throughput."""
    t = t or model.config.frames
    records = []
    tag = "+".join(m.value for m in modalities)
    for lo in range(0, len(groups), batch):
        chunk = groups[lo:lo + batch]
        stacks = []
        for mi in range(len(modalities)):
            arr = np.stack([
                _window(core.load_sequence(root, g[mi].meta).frames, t)
                for g in chunk]).astype(np.float32)
            stacks.append(arr)
        if len(modalities) == 1:
            feat = model.forward_single(modalities[0], stacks[0])
        else:
            feat = model.forward_pair(modalities[0], stacks[0],
                                      modalities[1], stacks[1])
        for i, group in enumerate(chunk):
            m0 = group[0].meta
            records.append(EmbeddingRecord(m0.subject_id, m0.view_deg,
                                           m0.condition, m0.trial, tag,
                                           feat.parts[i]))
    return records


def evaluate_records(gallery_records, probe_records_by_cond,
                     views=core.VALID_VIEWS):
    """Metric assembly from embedding records; pure and model-free."""
    all_views = list(core.VALID_VIEWS)
    vidx = {v: i for i, v in enumerate(all_views)}
    by_view_g = {}
    for r in gallery_records:
        by_view_g.setdefault(r.view_deg, []).append(r)
    conditions = {}
    matrices = {}
    for cond, records in probe_records_by_cond.items():
        by_view_p = {}
        for r in records:
            by_view_p.setdefault(r.view_deg, []).append(r)
        r1 = np.full((10, 10), np.nan)
        mp = np.full((10, 10), np.nan)
        for pv, plist in by_view_p.items():
            for gv, glist in by_view_g.items():
                if pv == gv:
                    continue
                g = ([r.subject_id for r in glist],
                     np.stack([r.feature for r in glist]))
                p = ([r.subject_id for r in plist],
                     np.stack([r.feature for r in plist]))
                r1[vidx[pv], vidx[gv]] = rank1_view_pair(g, p)
                ap, _ = mean_ap_view_pair(g, p)
                mp[vidx[pv], vidx[gv]] = ap
        conditions[cond] = {"rank1": cross_view_average(r1),
                            "mAP": cross_view_average(mp)}
        matrices[(cond, "rank1")] = r1
        matrices[(cond, "mAP")] = mp
    return conditions, matrices


def run_eval(model, manifest, root, spec, test_subjects=None):
    """Full protocol: build splits, embed, score. Deterministic."""
    missing = spec.needed_modalities() - set(model.config.modalities)
    if missing:
        raise errors.ProtocolError(
            f"checkpoint lacks modalities {sorted(m.value for m in missing)}")
    if test_subjects is not None:
        manifest = manifest.filter(subjects=set(test_subjects))
    gallery_groups, probe_groups, skipped = build_protocol(manifest, spec)
    gal_records = extract_embeddings(model, root, gallery_groups,
                                     spec.gallery_modality)
    probe_records = {
        cond: extract_embeddings(model, root, groups, spec.probe_modality)
        for cond, groups in probe_groups.items()}
    views = tuple(sorted({r.view_deg for r in gal_records}))
    conditions, matrices = evaluate_records(gal_records, probe_records, views)
    return EvalReport(conditions, matrices, skipped_pairs=skipped, views=views)


def run_matrix(model, manifest, root, modalities, test_subjects=None):
    """All single- and cross-modal reports for a modality set, reusing one
    embedding extraction per (modality, trial group)."""
    missing = set(modalities) - set(model.config.modalities)
    if missing:
        raise errors.ProtocolError(
            f"checkpoint lacks modalities {sorted(m.value for m in missing)}")
    if test_subjects is not None:
        manifest = manifest.filter(subjects=set(test_subjects))
    cache = {}
    for m in modalities:
        spec = ProtocolSpec("single", (m,), (m,))
        gal_groups, probe_groups, _ = build_protocol(manifest, spec)
        cache[m] = (
            extract_embeddings(model, root, gal_groups, (m,)),
            {cond: extract_embeddings(model, root, groups, (m,))
             for cond, groups in probe_groups.items()})
    reports = {}
    for pm in modalities:
        for gm in modalities:
            conditions, matrices = evaluate_records(cache[gm][0], cache[pm][1])
            reports[(pm.value, gm.value)] = EvalReport(conditions, matrices)
    return reports


def evaluate_from_records(records, gallery_tag, probe_tag):
    """Protocol evaluation on exported embedding records (no model)."""
    gallery = [r for r in records
               if r.modality_tag == gallery_tag
               and (r.condition, r.trial) == GALLERY_TRIAL]
    if not gallery:
        raise errors.EmptyGallery(f"no NM-01 records tagged {gallery_tag}")
    probes = {}
    for cond, (c, t) in PROBE_TRIALS.items():
        probes[cond] = [r for r in records
                        if r.modality_tag == probe_tag
                        and (r.condition, r.trial) == (c, t)]
    conditions, matrices = evaluate_records(gallery, probes)
    views = tuple(sorted({r.view_deg for r in gallery}))
    return EvalReport(conditions, matrices, views=views)


# --- embedding export ------------------------------------------------------------

EMB_MAGIC = b"GEMB"


def save_embeddings(path, records, spec_label, checkpoint_hash, c3, p):
    header = {"spec": spec_label, "checkpoint": checkpoint_hash,
              "c3": c3, "p": p, "count": len(records)}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for r in records:
            key = (f"{r.subject_id}/{r.condition}-{r.trial:02d}/"
                   f"{r.view_deg:03d}/{r.modality_tag}").encode()
            f.write(struct.pack("<H", len(key)))
            f.write(key)
            f.write(np.ascontiguousarray(r.feature, dtype="<f4").tobytes())


def load_embeddings(path):
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise errors.CorruptCheckpoint(f"bad embedding magic in {path}")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen].decode())
    off = 8 + hlen
    c3, p = header["c3"], header["p"]
    records = []
    for _ in range(header["count"]):
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        key = raw[off:off + klen].decode()
        off += klen
        feat = np.frombuffer(raw, dtype="<f4", count=c3 * p,
                             offset=off).reshape(c3, p).copy()
        off += 4 * c3 * p
        sid, ct, view, tag = key.split("/")
        cond, _, trial = ct.partition("-")
        records.append(EmbeddingRecord(sid, int(view), cond, int(trial),
                                       tag, feat))
    return header, records


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# --- modality-matrix export ---------------------------------------------------------


def export_matrix_csv(reports, out_dir, modalities):
    """reports: {(probe_tag, gallery_tag): EvalReport}. Writes one CSV per
    (metric, condition): diagonal = single-modal, off-diagonal = cross."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tags = [m.value for m in modalities]
    written = []
    for cond in CONDITIONS:
        for metric in ("rank1", "mAP"):
            lines = ["probe\\gallery," + ",".join(tags)]
            for pt in tags:
                row = [pt]
                for gt in tags:
                    rep = reports.get((pt, gt))
                    if rep is None or cond not in rep.conditions:
                        row.append("")
                    else:
                        row.append(f"{rep.conditions[cond][metric]:.6f}")
                lines.append(",".join(row))
            path = out_dir / f"matrix_{metric}_{cond}.csv"
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(path)
    return written
