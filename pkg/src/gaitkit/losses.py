"""Training objectives: per-part softmax cross-entropy, batch-all triplet,
the symmetric cross-modal triplet, and the variant-level combinations.

Features are (B, C3, P); distances average the per-part Euclidean distance
over the P parts, matching the evaluation metric. Each *_with_grad function
returns the scalar and the analytic input gradients the trainer feeds back
through the network; the plain-named wrappers return just the value.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import errors

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.2
_DIST_EPS = 1e-12


@dataclass
class LossReport:
    total: float
    components: dict
    nonzero_triplet_fraction: float
    streams: dict = field(default_factory=dict)

    def as_tsv_fields(self):
        c = self.components
        return (f"{self.total:.6f}", f"{c.get('ce', 0.0):.6f}",
                f"{c.get('triplet', 0.0):.6f}",
                f"{c.get('cross_triplet', 0.0):.6f}")


def part_distances(a, b):
    """(B1, C, P) x (B2, C, P) -> (B1, B2) mean-over-parts Euclidean, plus
    the per-part distances needed for gradients."""
    diff = a[:, None, :, :] - b[None, :, :, :]          # (B1, B2, C, P)
    dpp = np.sqrt((diff ** 2).sum(axis=2))               # (B1, B2, P)
    return dpp.mean(axis=2), dpp


def distance_matrix(a, b):
    return part_distances(a, b)[0]


def _dist_grad(a, b, d_mat):
    """Backprop d_mat (B1, B2) through the mean-part distance to (a, b)."""
    diff = a[:, None, :, :] - b[None, :, :, :]
    dpp = np.sqrt((diff ** 2).sum(axis=2))
    p = a.shape[2]
    scale = d_mat[:, :, None] / (p * np.maximum(dpp, _DIST_EPS))
    contrib = diff * scale[:, :, None, :]
    return contrib.sum(axis=1), -contrib.sum(axis=0)


def _batch_all_hinge(d_ap_mat, d_an_mat, pos_mask, neg_mask, margin):
    """Hinge over every (a, p, n); returns loss, the gradient coefficients
    on the two distance matrices, active count, and valid count."""
    h = (margin + d_ap_mat[:, :, None] - d_an_mat[:, None, :])
    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    active = valid & (h > 0)
    n_valid = int(valid.sum())
    n_active = int(active.sum())
    if n_valid == 0 or n_active == 0:
        return 0.0, np.zeros_like(d_ap_mat), np.zeros_like(d_an_mat), 0, n_valid
    loss = float(h[active].sum() / n_active)
    c_ap = active.sum(axis=2).astype(d_ap_mat.dtype) / n_active
    c_an = -active.sum(axis=1).astype(d_an_mat.dtype) / n_active
    return loss, c_ap, c_an, n_active, n_valid


def triplet_loss_with_grad(features, labels, margin=DEFAULT_MARGIN):
    features = np.asarray(features)
    labels = np.asarray(labels)
    b = features.shape[0]
    if b < 2 or np.unique(labels).size < 2:
        log.warning("degenerate triplet batch (single identity); loss = 0")
        return 0.0, np.zeros_like(features), 0.0
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    d, _ = part_distances(features, features)
    loss, c_ap, c_an, n_act, n_val = _batch_all_hinge(
        d, d, pos_mask, neg_mask, margin)
    coeff = c_ap + c_an
    ga, gb = _dist_grad(features, features, coeff)
    frac = n_act / n_val if n_val else 0.0
    return loss, ga + gb, frac


def triplet_loss(features, labels, margin=DEFAULT_MARGIN):
    return triplet_loss_with_grad(features, labels, margin)[0]


def ce_loss_with_grad(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b, c, p = logits.shape
    if c < 2:
        raise errors.ShapeMismatch("need at least 2 classes")
    if labels.min() < 0 or labels.max() >= c:
        raise errors.LabelOutOfRange(
            f"labels in [{labels.min()}, {labels.max()}] for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=1, keepdims=True)
    picked = sm[np.arange(b), labels]             # (B, P)
    loss = float(-np.log(np.maximum(picked, 1e-30)).mean())
    grad = sm.copy()
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / (b * p)


def ce_loss(logits, labels):
    return ce_loss_with_grad(logits, labels)[0]


def cross_modal_triplet_with_grad(feat_m1, feat_m2, labels,
                                  margin=DEFAULT_MARGIN):
    feat_m1 = np.asarray(feat_m1)
    feat_m2 = np.asarray(feat_m2)
    labels = np.asarray(labels)
    if feat_m1.shape != feat_m2.shape:
        raise errors.ShapeMismatch(f"{feat_m1.shape} vs {feat_m2.shape}")
    b = feat_m1.shape[0]
    if b < 2 or np.unique(labels).size < 2:
        log.warning("degenerate cross-modal batch; loss = 0")
        return 0.0, np.zeros_like(feat_m1), np.zeros_like(feat_m2), 0.0
    same = labels[:, None] == labels[None, :]
    d12, _ = part_distances(feat_m1, feat_m2)
    # anchors from m1 against positives/negatives from m2: the aligned
    # same-index pair counts as a positive (different modality, same sample)
    l1, c_ap1, c_an1, a1, v1 = _batch_all_hinge(d12, d12, same, ~same, margin)
    d21 = d12.T.copy()
    l2, c_ap2, c_an2, a2, v2 = _batch_all_hinge(d21, d21, same, ~same, margin)
    loss = 0.5 * (l1 + l2)
    coeff12 = (c_ap1 + c_an1) * 0.5 + ((c_ap2 + c_an2) * 0.5).T
    g1, g2 = _dist_grad(feat_m1, feat_m2, coeff12)
    frac = (a1 + a2) / (v1 + v2) if (v1 + v2) else 0.0
    return loss, g1, g2, frac


def cross_modal_triplet(feat_m1, feat_m2, labels, margin=DEFAULT_MARGIN):
    return cross_modal_triplet_with_grad(feat_m1, feat_m2, labels, margin)[0]


def two_stream_objective(feats, logits, labels, margin=DEFAULT_MARGIN):
    """feats/logits: {stream name: array} for exactly two modality streams.
    Implements L_total = 1/2 (L_cross_triplet + L_ce) with
    L_ce = 1/2 (L_ce^m1 + L_ce^m2)."""
    report, _, _ = two_stream_objective_with_grads(feats, logits, labels, margin)
    return report


def two_stream_objective_with_grads(feats, logits, labels,
                                    margin=DEFAULT_MARGIN):
    names = list(feats)
    if len(names) != 2:
        raise errors.WrongVariant("two-stream objective needs 2 streams")
    n1, n2 = names
    cross, g1, g2, frac = cross_modal_triplet_with_grad(
        feats[n1], feats[n2], labels, margin)
    ce1, gl1 = ce_loss_with_grad(logits[n1], labels)
    ce2, gl2 = ce_loss_with_grad(logits[n2], labels)
    ce = 0.5 * (ce1 + ce2)
    total = 0.5 * (cross + ce)
    report = LossReport(
        total=total,
        components={"ce": ce, "triplet": 0.0, "cross_triplet": cross},
        nonzero_triplet_fraction=frac,
        streams={n1: {"ce": ce1}, n2: {"ce": ce2}})
    d_pre = {n1: 0.5 * g1, n2: 0.5 * g2}
    d_logits = {n1: 0.25 * gl1, n2: 0.25 * gl2}
    return report, d_pre, d_logits


def omni_objective(feats, logits, labels, margin=DEFAULT_MARGIN):
    report, _, _ = omni_objective_with_grads(feats, logits, labels, margin)
    return report


def omni_objective_with_grads(feats, logits, labels, margin=DEFAULT_MARGIN):
    """Mean over streams of (ce + triplet), equally weighted. feats hold the
    pre-BNNeck features, logits the post-BNNeck classifier outputs."""
    names = list(feats)
    if not names:
        raise errors.EmptyInput("no streams")
    s = len(names)
    d_pre, d_logits, streams = {}, {}, {}
    tot_ce = tot_tri = 0.0
    fracs = []
    for name in names:
        ce, gl = ce_loss_with_grad(logits[name], labels)
        tri, gf, frac = triplet_loss_with_grad(feats[name], labels, margin)
        tot_ce += ce
        tot_tri += tri
        fracs.append(frac)
        d_logits[name] = gl / s
        d_pre[name] = gf / s
        streams[name] = {"ce": ce, "triplet": tri}
    report = LossReport(
        total=(tot_ce + tot_tri) / s,
        components={"ce": tot_ce / s, "triplet": tot_tri / s,
                    "cross_triplet": 0.0},
        nonzero_triplet_fraction=float(np.mean(fracs)),
        streams=streams)
    return report, d_pre, d_logits
