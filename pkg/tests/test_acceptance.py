"""Acceptance suite: one test per criterion, each printing a PASS line.

Criterion 8 trains the desk-scale model once (session fixture) and shares
the checkpoint with criterion 10. Run with `pytest tests/test_acceptance.py
-v -s` to watch the per-criterion lines.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from gaitkit import core, evalproto, losses, synthgen, trainer
from gaitkit.core import Modality
from gaitkit.model import FusionModule, GaitNet, OmniGaitConfig
from gaitkit.model.layers import BatchNorm2d

SIL = Modality.RGB_SILHOUETTE
DEP = Modality.DEPTH
EVT = Modality.EVENT

PASS = "ACCEPTANCE {n}: PASS ({msg})"


# --- 1: shape contract ---------------------------------------------------------

def test_criterion_01_shape_contract_full_width():
    cfg = OmniGaitConfig(modalities=core.IMAGE_MODALITIES, base_channels=128,
                         parts=16, num_classes=0, variant="omni", seed=0)
    net = GaitNet(cfg)
    assert (cfg.c1, cfg.c2, cfg.c3) == (128, 512, 256)
    rng = np.random.default_rng(0)
    # warm the jitted kernels outside the timed window (compile cost is
    # one-time setup, cached across runs)
    net.forward_single(SIL, rng.random((16, 1, 64, 64), dtype=np.float32))
    t0 = time.monotonic()
    for m in core.IMAGE_MODALITIES:
        x = rng.random((16, m.channels, 64, 64), dtype=np.float32)
        f = net.encode(m, x)
        assert f.shape == (1, 16, 128, 64, 64)
        out = net.shared_forward([f])[0]
        assert out.shape == (1, 16, 512, 16, 16)
        pooled = net.temporal_pool(out)
        assert pooled.shape == (1, 512, 16, 16)
        parts = net.hpp(pooled)
        assert parts.shape == (1, 512, 16)
        feat = net.forward_single(m, x)
        assert feat.parts.shape == (256, 16)
        assert np.isfinite(feat.parts).all()
    for other in (DEP, EVT, Modality.RGB):
        xi = rng.random((16, SIL.channels, 64, 64), dtype=np.float32)
        xj = rng.random((16, other.channels, 64, 64), dtype=np.float32)
        fi = net.encode(SIL, xi)
        fj = net.encode(other, xj)
        fused = net.fuse(fi, fj)
        assert fused.shape == (1, 16, 128, 64, 64)
        feat = net.forward_pair(SIL, xi, other, xj)
        assert feat.parts.shape == (256, 16)
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0, f"shape suite took {elapsed:.1f}s"
    print(PASS.format(n=1, msg=f"9 modalities + 3 pairs in {elapsed:.1f}s"))


# --- 2: gate normalization ------------------------------------------------------

def test_criterion_02_gate_normalization():
    rng = np.random.default_rng(1)
    fm = FusionModule(8, np.random.Generator(np.random.PCG64(0)))
    f = rng.normal(size=(1000, 2, 8, 4, 4)).astype(np.float32)
    w = fm.gate_weights(f)
    assert w.shape == (1000, 2)
    assert np.abs(w.sum(axis=1) - 1.0).max() <= 1e-6
    assert (w > 0).all() and (w < 1).all()
    print(PASS.format(n=2, msg="1000 inputs, sum=1 within 1e-6, in (0,1)"))


# --- 3: forced-gate linearity ----------------------------------------------------

def test_criterion_03_forced_gate_linearity():
    rng = np.random.default_rng(2)
    for alpha in (0.0, 0.5, 1.0):
        fm = FusionModule(8, np.random.Generator(np.random.PCG64(3)))
        fm.mix_weight.data[:] = 0
        fm.g2_w.data[:] = 0
        fm.g2_b.data[:] = {0.0: [-1e4, 0.0], 0.5: [0.0, 0.0],
                           1.0: [0.0, -1e4]}[alpha]
        fi = rng.normal(size=(2, 4, 8, 6, 6)).astype(np.float32)
        fj = rng.normal(size=(2, 4, 8, 6, 6)).astype(np.float32)
        out = fm.forward(fi, fj, False)
        expected = np.float32(alpha) * fi + np.float32(1 - alpha) * fj
        assert (out == expected).all(), f"alpha={alpha} not bitwise"
    print(PASS.format(n=3, msg="bitwise float32 at alpha in {0, 0.5, 1}"))


# --- 4: fusion gradient check -----------------------------------------------------

def test_criterion_04_fusion_gradient_check():
    rng = np.random.Generator(np.random.PCG64(4))
    fm = FusionModule(8, rng, dtype=np.float64)
    fi = rng.normal(size=(1, 4, 8, 4, 4))
    fj = rng.normal(size=(1, 4, 8, 4, 4))
    r = rng.normal(size=fi.shape)

    def loss(a, b):
        return float((fm.forward(a, b, False) * r).sum())

    fm.forward(fi, fj, True)
    gfi, gfj = fm.backward(r)
    assert np.abs(gfi).max() > 0 and np.abs(gfj).max() > 0
    eps = 1e-6
    worst = 0.0
    for arr, grad, is_fi in ((fi, gfi, True), (fj, gfj, False)):
        for _ in range(6):
            i = tuple(rng.integers(0, s) for s in arr.shape)
            up = arr.copy(); up[i] += eps
            dn = arr.copy(); dn[i] -= eps
            fd = ((loss(up, fj) - loss(dn, fj)) if is_fi
                  else (loss(fi, up) - loss(fi, dn))) / (2 * eps)
            rel = abs(grad[i] - fd) / max(abs(fd), 1e-12)
            worst = max(worst, rel)
    assert worst < 1e-4
    print(PASS.format(n=4, msg=f"max relative error {worst:.2e}, "
                               "both inputs receive gradient"))


# --- 5: mixed-batch statistics ----------------------------------------------------

def test_criterion_05_mixed_batch_statistics():
    rng = np.random.default_rng(5)
    a = rng.normal(0.0, 1.0, (6, 4, 5, 5)).astype(np.float32)
    b = rng.normal(2.5, 0.6, (6, 4, 5, 5)).astype(np.float32)
    bn = BatchNorm2d(4)
    bn.forward(np.concatenate([a, b]), True)
    mu, var = bn.last_batch_stats
    joint = np.concatenate([a, b]).astype(np.float64)
    hand_mu = joint.mean(axis=(0, 2, 3))
    hand_var = joint.var(axis=(0, 2, 3))
    assert np.abs(mu - hand_mu).max() < 1e-6
    assert np.abs(var - hand_var).max() < 1e-6
    bn_a = BatchNorm2d(4)
    bn_a.forward(a, True)
    mu_a, _ = bn_a.last_batch_stats
    assert np.abs(mu_a - mu).max() > 1e-3  # shifted inputs -> different stats
    print(PASS.format(n=5, msg="joint stats = hand-computed within 1e-6 and "
                               "differ from single-modality stats"))


# --- 6: metric oracles -------------------------------------------------------------

def _oracle_rank1(g_ids, g, p_ids, p):
    hits = 0
    for i in range(len(p_ids)):
        d = [np.linalg.norm(p[i] - g[j], axis=0).mean()
             for j in range(len(g_ids))]
        hits += g_ids[int(np.argmin(d))] == p_ids[i]
    return 100.0 * hits / len(p_ids)


def _oracle_ap(dists, rel):
    order = sorted(range(len(dists)), key=lambda j: (dists[j], j))
    hits, precs = 0, []
    for rank, j in enumerate(order, 1):
        if rel[j]:
            hits += 1
            precs.append(hits / rank)
    return sum(precs) / len(precs) if precs else None


def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(6)
    for _ in range(200):
        n_g = int(rng.integers(2, 41))
        n_p = int(rng.integers(1, 41))
        ids = int(rng.integers(2, 9))
        g_ids = [f"s{rng.integers(0, ids)}" for _ in range(n_g)]
        p_ids = [f"s{rng.integers(0, ids)}" for _ in range(n_p)]
        g = rng.normal(size=(n_g, 5, 3))
        p = rng.normal(size=(n_p, 5, 3))
        assert evalproto.rank1_view_pair((g_ids, g), (p_ids, p)) == \
            _oracle_rank1(g_ids, g, p_ids, p)
        got, _ = evalproto.mean_ap_view_pair((g_ids, g), (p_ids, p))
        aps = []
        for i in range(n_p):
            d = [np.linalg.norm(p[i] - g[j], axis=0).mean()
                 for j in range(n_g)]
            ap = _oracle_ap(d, [g_ids[j] == p_ids[i] for j in range(n_g)])
            if ap is not None:
                aps.append(ap)
        want = 100.0 * np.mean(aps) if aps else float("nan")
        if math.isnan(want):
            assert math.isnan(got)
        else:
            assert abs(got - want) < 1e-9
    m = np.zeros((10, 10))
    m[np.diag_indices(10)] = np.nan
    mask = ~np.isnan(m)
    np.fill_diagonal(mask, False)
    assert mask.sum() == 90
    assert evalproto.cross_view_average(np.where(np.isnan(m), np.nan, 3.0)) == 3.0
    print(PASS.format(n=6, msg="200 instances exact/1e-9; 90 off-diagonal "
                               "cells for 10 views"))


# --- 7: loss identities --------------------------------------------------------------

def test_criterion_07_loss_identities():
    f = np.ones((6, 8, 4))
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert losses.triplet_loss(f, labels, margin=0.2) == pytest.approx(0.2)
    for c in (3, 10):
        assert losses.ce_loss(np.zeros((4, c, 16)), np.arange(4) % c) == \
            pytest.approx(math.log(c), abs=1e-6)
    rng = np.random.default_rng(7)
    for _ in range(10):
        f1 = rng.normal(size=(6, 8, 4))
        f2 = rng.normal(size=(6, 8, 4))
        lab = rng.integers(0, 3, 6)
        lab[0] = (lab[1] + 1) % 3
        assert losses.cross_modal_triplet(f1, f2, lab, 0.3) == \
            losses.cross_modal_triplet(f2, f1, lab, 0.3)  # exact symmetry

    def oracle_triplet(feats, lab, margin):
        terms = []
        b = len(feats)
        dist = lambda i, j: float(np.linalg.norm(feats[i] - feats[j],
                                                 axis=0).mean())
        for a in range(b):
            for q in range(b):
                if q == a or lab[q] != lab[a]:
                    continue
                for n in range(b):
                    if lab[n] == lab[a]:
                        continue
                    terms.append(margin + dist(a, q) - dist(a, n))
        act = [t for t in terms if t > 0]
        return sum(act) / len(act) if act else 0.0

    def oracle_cross(f1, f2, lab, margin):
        def one(anc, oth):
            terms = []
            for a in range(len(anc)):
                for q in range(len(oth)):
                    if lab[q] != lab[a]:
                        continue
                    for n in range(len(oth)):
                        if lab[n] == lab[a]:
                            continue
                        terms.append(margin
                                     + float(np.linalg.norm(anc[a] - oth[q],
                                                            axis=0).mean())
                                     - float(np.linalg.norm(anc[a] - oth[n],
                                                            axis=0).mean()))
            act = [t for t in terms if t > 0]
            return sum(act) / len(act) if act else 0.0
        return 0.5 * (one(f1, f2) + one(f2, f1))

    for _ in range(12):
        b = int(rng.integers(4, 9))
        lab = rng.integers(0, 3, b)
        if np.unique(lab).size < 2:
            lab[0] = (lab[1] + 1) % 3
        fa = rng.normal(size=(b, 6, 3))
        fb = rng.normal(size=(b, 6, 3))
        assert losses.triplet_loss(fa, lab, 0.25) == pytest.approx(
            oracle_triplet(fa, lab, 0.25), abs=1e-9)
        assert losses.cross_modal_triplet(fa, fb, lab, 0.25) == pytest.approx(
            oracle_cross(fa, fb, lab, 0.25), abs=1e-9)
    print(PASS.format(n=7, msg="margin / ln c / swap symmetry / oracle "
                               "equivalence for B<=8"))


# --- 8 & 10: desk-scale end-to-end run ------------------------------------------------

DESK_MODALITIES = (SIL, DEP, EVT)
DESK_VIEWS = (0, 72, 144, 216, 288)
DESK_STEPS = 480
TRAIN_BUDGET_S = 20 * 60


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("desk")
    root = base / "data"
    gen = synthgen.GenConfig(n_train_subjects=20, n_test_subjects=10,
                             views=DESK_VIEWS, t_raw=24, seed=0,
                             modalities=DESK_MODALITIES)
    synthgen.generate_dataset(gen, root)
    manifest = core.read_manifest(root / "manifest.tsv")
    splits = core.read_splits(root)
    train_man = manifest.filter(subjects=set(splits["train"]))
    model = GaitNet(OmniGaitConfig(
        modalities=DESK_MODALITIES, base_channels=4, parts=16,
        num_classes=len(splits["train"]), variant="omni", seed=0))
    tcfg = trainer.TrainConfig(
        total_iterations=DESK_STEPS, base_lr=0.1,
        lr_milestones=(int(DESK_STEPS * 0.75),), seed=0,
        batch=trainer.BatchSpec(p=4, k=2, t=16), checkpoint_every=0,
        log_every=100)
    t0 = time.monotonic()
    trainer.fit(model, train_man, root, tcfg, base / "run")
    train_s = time.monotonic() - t0
    return {"root": root, "manifest": manifest, "model": model,
            "test_subjects": set(splits["test"]), "train_seconds": train_s}


def test_criterion_08_desk_scale_run(desk_run):
    assert desk_run["train_seconds"] <= TRAIN_BUDGET_S, \
        f"training took {desk_run['train_seconds']:.0f}s"
    model = desk_run["model"]
    man = desk_run["manifest"]
    root = desk_run["root"]
    subs = desk_run["test_subjects"]

    single = evalproto.run_eval(model, man, root,
                                evalproto.ProtocolSpec("single", (SIL,), (SIL,)),
                                test_subjects=subs)
    cross_s2d = evalproto.run_eval(model, man, root,
                                   evalproto.ProtocolSpec("cross", (DEP,), (SIL,)),
                                   test_subjects=subs)
    cross_d2s = evalproto.run_eval(model, man, root,
                                   evalproto.ProtocolSpec("cross", (SIL,), (DEP,)),
                                   test_subjects=subs)
    fused = evalproto.run_eval(model, man, root,
                               evalproto.ProtocolSpec("multi", (SIL, DEP),
                                                      (SIL, DEP)),
                               test_subjects=subs)
    nm = single.conditions["NM"]["rank1"]
    bg = single.conditions["BG"]["rank1"]
    cl = single.conditions["CL"]["rank1"]
    assert nm >= 60.0, f"single-modal silhouette NM Rank-1 {nm:.1f}% < 60%"
    assert nm >= bg >= cl, f"difficulty ordering violated: {nm}/{bg}/{cl}"
    c1 = cross_s2d.conditions["NM"]["rank1"]
    c2 = cross_d2s.conditions["NM"]["rank1"]
    assert c1 >= 30.0 and c2 >= 30.0, \
        f"cross-modal NM Rank-1 {c1:.1f}/{c2:.1f}% < 30%"
    fused_cl = fused.conditions["CL"]["rank1"]
    assert fused_cl > cl, \
        f"fusion gain missing: fused CL {fused_cl:.1f} <= single {cl:.1f}"
    print(PASS.format(
        n=8, msg=f"train {desk_run['train_seconds']:.0f}s; single NM/BG/CL "
                 f"{nm:.1f}/{bg:.1f}/{cl:.1f}; cross {c1:.1f}/{c2:.1f}; "
                 f"fused CL {fused_cl:.1f} > {cl:.1f}"))


# --- 9: reproducibility ----------------------------------------------------------------

def _tree_digest(root):
    h = hashlib.sha256()
    for f in sorted(Path(root).rglob("*")):
        if f.is_file():
            h.update(f.relative_to(root).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_criterion_09_reproducibility(tmp_path, mini_root):
    gen = synthgen.GenConfig(n_train_subjects=1, n_test_subjects=1,
                             views=(72,), t_raw=16, seed=9,
                             modalities=(SIL, Modality.LIDAR_POINTS))
    synthgen.generate_dataset(gen, tmp_path / "a")
    synthgen.generate_dataset(gen, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    man = core.read_manifest(mini_root / "manifest.tsv")
    splits = core.read_splits(mini_root)
    train_man = man.filter(subjects=set(splits["train"]))
    cfg = OmniGaitConfig(modalities=(SIL, DEP), base_channels=4, parts=16,
                         num_classes=4, seed=1)
    tcfg = trainer.TrainConfig(total_iterations=3, seed=5,
                               batch=trainer.BatchSpec(2, 2, 16),
                               checkpoint_every=0)
    p1 = trainer.fit(GaitNet(cfg), train_man, mini_root, tcfg, tmp_path / "r1")
    p2 = trainer.fit(GaitNet(cfg), train_man, mini_root, tcfg, tmp_path / "r2")
    assert p1.read_bytes() == p2.read_bytes()

    model, opt, step, rng_state = trainer.load_checkpoint(p1)
    p3 = trainer.save_checkpoint(tmp_path / "resaved.gkpt", model, opt, step,
                                 rng_state)
    assert p3.read_bytes() == p1.read_bytes()
    print(PASS.format(n=9, msg="datasets, double-fit checkpoints, and "
                               "save/load round trips are byte-identical"))


# --- 10: report-matrix artifact ----------------------------------------------------------

def test_criterion_10_report_matrix(desk_run, tmp_path):
    reports = evalproto.run_matrix(desk_run["model"], desk_run["manifest"],
                                   desk_run["root"], DESK_MODALITIES,
                                   test_subjects=desk_run["test_subjects"])
    files = evalproto.export_matrix_csv(reports, tmp_path, DESK_MODALITIES)
    assert len(files) == 6
    for path in files:
        rows = path.read_text().splitlines()
        assert rows[0].split(",")[1:] == [m.value for m in DESK_MODALITIES]
        assert len(rows) == 4
        for line in rows[1:]:
            cells = line.split(",")[1:]
            assert len(cells) == 3 and all(c != "" for c in cells)
    # diagonal is single-modal: matches a directly computed single protocol
    rep = evalproto.run_eval(
        desk_run["model"], desk_run["manifest"], desk_run["root"],
        evalproto.ProtocolSpec("single", (SIL,), (SIL,)),
        test_subjects=desk_run["test_subjects"])
    rows = (tmp_path / "matrix_rank1_NM.csv").read_text().splitlines()
    diag = float(rows[1].split(",")[1])
    assert diag == pytest.approx(rep.conditions["NM"]["rank1"], abs=1e-6)
    print(PASS.format(n=10, msg="6 CSV matrices, 3x3, diagonal = "
                                "single-modal results"))
