"""Command-line entry point.

Subcommands: synth-gen, preprocess, train, eval, export-embeddings,
report-matrix. Settings come from a YAML config file organized in sections
(synth / preprocess / model / train / eval); --set section.key=value
overrides individual entries and --seed overrides every seed at once.
Unknown keys are fatal. Exit codes: 0 success, 1 domain error, 2 usage or
config error. Logs go to stderr; all artifacts live under --out.
"""

import argparse
import atexit
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import core, errors, evalproto, preprocess, synthgen, trainer
from .core import Modality
from .model import GaitNet, OmniGaitConfig

log = logging.getLogger("gaitkit")

_ALL_TAGS = [m.value for m in Modality]

# section -> key -> (type tag, default); list[x] values arrive as YAML lists
# or comma-separated strings
SCHEMA = {
    "synth": {
        "n_train_subjects": ("int", 2),
        "n_test_subjects": ("int", 1),
        "views": ("int_list", [0, 72, 144, 216, 288]),
        "t_raw": ("int", 24),
        "seed": ("int", 0),
        "modalities": ("str_list", list(_ALL_TAGS)),
        "pixel_pitch": ("float", 0.018),
        "include_floor": ("bool", True),
        "radar_min": ("int", 20),
        "radar_max": ("int", 80),
        "event_threshold": ("float", 0.1),
        "heatmap_sigma": ("float", 2.0),
        "d_near": ("float", 0.0),
        "d_far": ("float", 1.5),
    },
    "preprocess": {
        "sources": ("str_list", ["lidar", "radar", "event", "pose"]),
        "roi_lo": ("float_list", [-50.0, -50.0, -1.0]),
        "roi_hi": ("float_list", [50.0, 50.0, 3.0]),
        "z_threshold": ("float", 0.05),
        "eps": ("float", 0.25),
        "min_pts": ("int", 5),
        "pixel_pitch": ("float", 0.018),
        "d_near": ("float", 0.0),
        "d_far": ("float", 1.5),
        "event_threshold": ("float", 0.1),
        "heatmap_sigma": ("float", 2.0),
        "overwrite": ("bool", False),
    },
    "model": {
        "modalities": ("str_list", ["rgb_silhouette", "depth", "event"]),
        "base_channels": ("int", 128),
        "parts": ("int", 16),
        "variant": ("str", "omni"),
        "seed": ("int", 0),
    },
    "train": {
        "total_iterations": ("int", 3000),
        "base_lr": ("float", 0.1),
        "momentum": ("float", 0.9),
        "weight_decay": ("float", 5e-4),
        "lr_milestones": ("int_list", []),
        "p": ("int", 8),
        "k": ("int", 4),
        "t": ("int", 16),
        "margin": ("float", 0.2),
        "anchor": ("str", "rgb_silhouette"),
        "checkpoint_every": ("int", 1000),
        "log_every": ("int", 25),
        "seed": ("int", 0),
    },
    "eval": {
        "mode": ("str", "single"),
        "gallery_modality": ("str_list", ["rgb_silhouette"]),
        "probe_modality": ("str_list", ["rgb_silhouette"]),
        "split": ("str", "test"),
        "modalities": ("str_list", ["rgb_silhouette", "depth", "event"]),
    },
}


def _coerce(section, key, kind, value):
    def fail(msg):
        raise errors.ConfigKeyError(f"{section}.{key}: {msg}")
    try:
        if kind == "int":
            if isinstance(value, bool):
                fail("expected integer")
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("true", "1", "yes"):
                return True
            if str(value).lower() in ("false", "0", "no"):
                return False
            fail(f"expected boolean, got {value!r}")
        if kind == "str":
            return str(value)
        if kind.endswith("_list"):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v != ""]
            if not isinstance(value, (list, tuple)):
                fail("expected a list")
            elem = {"int_list": int, "float_list": float,
                    "str_list": str}[kind]
            return [elem(v) for v in value]
    except (TypeError, ValueError) as exc:
        fail(str(exc))
    raise AssertionError(kind)


def load_config(path=None, overrides=(), seed=None):
    cfg = {s: {k: v for k, (_, v) in keys.items()}
           for s, keys in SCHEMA.items()}
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise errors.ConfigKeyError("config root must be a mapping")
    for section, entries in raw.items():
        if section not in SCHEMA:
            raise errors.ConfigKeyError(f"unknown config section {section!r}")
        if not isinstance(entries, dict):
            raise errors.ConfigKeyError(f"section {section!r} must be a mapping")
        for key, value in entries.items():
            if key not in SCHEMA[section]:
                raise errors.ConfigKeyError(f"unknown key {section}.{key}")
            cfg[section][key] = _coerce(section, key, SCHEMA[section][key][0],
                                        value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise errors.ConfigKeyError(
                f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise errors.ConfigKeyError(f"unknown key {dotted}")
        cfg[section][key] = _coerce(section, key, SCHEMA[section][key][0],
                                    value)
    if seed is not None:
        for section in ("synth", "model", "train"):
            cfg[section]["seed"] = seed
    return cfg


def _mods(tags):
    try:
        return tuple(Modality(t) for t in tags)
    except ValueError as exc:
        raise errors.ConfigKeyError(f"unknown modality: {exc}") from None


class OutputLock:
    """One process per output directory."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".gaitkit.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise errors.OutputDirLocked(
                f"{self.path} exists; another run owns this directory "
                "(delete the lock if that run is dead)") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        atexit.register(self._cleanup)
        return self

    def _cleanup(self):
        self.path.unlink(missing_ok=True)

    def __exit__(self, *exc):
        self._cleanup()
        atexit.unregister(self._cleanup)
        return False


def _log_resolved(cfg, sections):
    for s in sections:
        log.info("config [%s] %s", s, json.dumps(cfg[s], sort_keys=True))


def _load_manifest(root):
    path = Path(root) / "manifest.tsv"
    if path.exists():
        return core.read_manifest(path, root)
    return core.scan_manifest(root)


# --- subcommand handlers ------------------------------------------------------


def cmd_synth_gen(args):
    cfg = load_config(args.config, args.set, args.seed)
    _log_resolved(cfg, ["synth"])
    s = cfg["synth"]
    render = synthgen.RenderConfig(
        pixel_pitch=s["pixel_pitch"], include_floor=s["include_floor"],
        radar_min=s["radar_min"], radar_max=s["radar_max"],
        event_threshold=s["event_threshold"],
        heatmap_sigma=s["heatmap_sigma"], d_near=s["d_near"], d_far=s["d_far"])
    gen = synthgen.GenConfig(
        n_train_subjects=s["n_train_subjects"],
        n_test_subjects=s["n_test_subjects"], views=tuple(s["views"]),
        t_raw=s["t_raw"], seed=s["seed"], modalities=_mods(s["modalities"]),
        render=render)
    with OutputLock(args.out):
        manifest = synthgen.generate_dataset(gen, args.out)
    log.info("wrote %d sequences under %s", len(manifest), args.out)
    return 0


def _derive_targets(cfg_p):
    return {
        "lidar": (Modality.LIDAR_POINTS, Modality.LIDAR_PROJ_DEPTH),
        "radar": (Modality.RADAR_POINTS, Modality.RADAR_PROJ_DEPTH),
        "event": (Modality.RGB, Modality.EVENT),
        "pose": (None, Modality.POSE2D_HEATMAP),
    }


def cmd_preprocess(args):
    cfg = load_config(args.config, args.set, args.seed)
    _log_resolved(cfg, ["preprocess"])
    p = cfg["preprocess"]
    root = Path(args.root)
    manifest = _load_manifest(root)
    pipe = preprocess.PointPipelineConfig(
        roi=preprocess.ROI(tuple(p["roi_lo"]), tuple(p["roi_hi"])),
        z_threshold=p["z_threshold"], eps=p["eps"], min_pts=p["min_pts"],
        projection=preprocess.ProjectionConfig(
            pixel_pitch=p["pixel_pitch"], d_near=p["d_near"],
            d_far=p["d_far"]))
    targets = _derive_targets(p)
    by_key = manifest.by_key()
    made = skipped = 0
    for name in p["sources"]:
        if name not in targets:
            raise errors.ConfigKeyError(f"preprocess.sources: unknown {name!r}")
        src_mod, dst_mod = targets[name]
        if src_mod is None:
            # pose heatmaps come from the trial-level joints2d record
            seen = set()
            candidates = [e.meta for e in manifest.entries
                          if e.meta.trial_key not in seen
                          and not seen.add(e.meta.trial_key)]
        else:
            candidates = [e.meta for e in manifest.entries
                          if e.meta.modality is src_mod]
        for meta in candidates:
            dst_meta = meta.with_modality(dst_mod)
            if dst_meta.key in by_key and not p["overwrite"]:
                skipped += 1
                continue
            try:
                frames = _derive(root, meta, dst_mod, pipe, p)
            except errors.GaitError as exc:
                log.warning("skipping %s: %s", dst_meta.key, exc)
                continue
            core.save_sequence(root, core.GaitSequence(dst_meta, frames))
            made += 1
    manifest = core.scan_manifest(root)
    core.write_manifest(manifest, root / "manifest.tsv")
    log.info("derived %d sequences (%d already present)", made, skipped)
    return 0


def _derive(root, src_meta, dst_mod, pipe, p):
    axis = synthgen.view_direction(src_meta.view_deg)
    if dst_mod in (Modality.LIDAR_PROJ_DEPTH, Modality.RADAR_PROJ_DEPTH):
        seq = core.load_sequence(root, src_meta)
        return preprocess.point_frames_to_depth(seq.frames, pipe, axis)
    if dst_mod is Modality.EVENT:
        seq = core.load_sequence(root, src_meta)
        return preprocess.simulate_events(seq.frames, p["event_threshold"])
    if dst_mod is Modality.POSE2D_HEATMAP:
        path = (core.sequence_dir(root, src_meta).parent / "joints2d.json")
        if not path.exists():
            raise errors.MissingModality(f"no joints2d.json for {src_meta.key}")
        joints = np.asarray(json.loads(path.read_text()), dtype=np.float64)
        return preprocess.pose_to_heatmaps(joints / preprocess.OUT_SIZE,
                                           p["heatmap_sigma"])
    raise AssertionError(dst_mod)


def cmd_train(args):
    cfg = load_config(args.config, args.set, args.seed)
    _log_resolved(cfg, ["model", "train"])
    root = Path(args.data)
    manifest = _load_manifest(root)
    splits = core.read_splits(root)
    train_man = manifest.filter(subjects=set(splits["train"]))
    m = cfg["model"]
    t = cfg["train"]
    model_cfg = OmniGaitConfig(
        modalities=_mods(m["modalities"]), base_channels=m["base_channels"],
        parts=m["parts"], num_classes=len(splits["train"]),
        variant=m["variant"], seed=m["seed"])
    tcfg = trainer.TrainConfig(
        total_iterations=t["total_iterations"], base_lr=t["base_lr"],
        momentum=t["momentum"], weight_decay=t["weight_decay"],
        lr_milestones=tuple(t["lr_milestones"]), seed=t["seed"],
        anchor=Modality(t["anchor"]),
        batch=trainer.BatchSpec(t["p"], t["k"], t["t"]), margin=t["margin"],
        checkpoint_every=t["checkpoint_every"], log_every=t["log_every"])
    with OutputLock(args.out):
        if args.resume:
            model, _, _, _ = trainer.load_checkpoint(args.resume)
            if model.config != model_cfg:
                raise errors.ConfigMismatch(
                    "resume checkpoint was built from a different model config")
            final = trainer.fit(model, train_man, root, tcfg, args.out,
                                resume_from=args.resume)
        else:
            model = GaitNet(model_cfg)
            final = trainer.fit(model, train_man, root, tcfg, args.out)
    log.info("final checkpoint: %s", final)
    print(final)
    return 0


def _eval_spec(e):
    return evalproto.ProtocolSpec(e["mode"], _mods(e["gallery_modality"]),
                                  _mods(e["probe_modality"]))


def _test_subjects(root, split):
    splits = core.read_splits(root)
    if split not in splits:
        raise errors.ProtocolError(f"split {split!r} not in splits.json")
    return set(splits[split])


def cmd_eval(args):
    cfg = load_config(args.config, args.set, args.seed)
    _log_resolved(cfg, ["eval"])
    e = cfg["eval"]
    spec = _eval_spec(e)
    out = Path(args.out)
    with OutputLock(out):
        if args.embeddings:
            _, records = evalproto.load_embeddings(args.embeddings)
            if spec.mode == "multi":
                raise errors.ProtocolError(
                    "multi-mode evaluation needs the model, not embeddings")
            report = evalproto.evaluate_from_records(
                records, spec.gallery_modality[0].value,
                spec.probe_modality[0].value)
        else:
            root = Path(args.data)
            manifest = _load_manifest(root)
            model, _, _, _ = trainer.load_checkpoint(args.checkpoint)
            report = evalproto.run_eval(
                model, manifest, root, spec,
                test_subjects=_test_subjects(root, e["split"]))
        _write_report(out, spec, report)
    for line in report.summary_lines():
        log.info("%s", line)
    return 0


def _write_report(out, spec, report):
    out.mkdir(parents=True, exist_ok=True)
    tag = (f"{spec.mode}:"
           f"{'+'.join(m.value for m in spec.probe_modality)}->"
           f"{'+'.join(m.value for m in spec.gallery_modality)}")
    lines = [f"protocol {tag}"] + report.summary_lines()
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    rows = ["condition,rank1,mAP"]
    for cond in ("NM", "BG", "CL"):
        if cond in report.conditions:
            c = report.conditions[cond]
            rows.append(f"{cond},{c['rank1']:.6f},{c['mAP']:.6f}")
    (out / "report.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    for (cond, metric), mat in report.matrices.items():
        path = out / f"views_{metric}_{cond}.csv"
        with open(path, "w", encoding="utf-8") as f:
            f.write("probe_view\\gallery_view,"
                    + ",".join(str(v) for v in core.VALID_VIEWS) + "\n")
            for i, pv in enumerate(core.VALID_VIEWS):
                cells = ["" if np.isnan(x) else f"{x:.6f}" for x in mat[i]]
                f.write(f"{pv}," + ",".join(cells) + "\n")


def cmd_export_embeddings(args):
    cfg = load_config(args.config, args.set, args.seed)
    e = cfg["eval"]
    root = Path(args.data)
    manifest = _load_manifest(root)
    model, _, _, _ = trainer.load_checkpoint(args.checkpoint)
    subjects = _test_subjects(root, e["split"])
    test_man = manifest.filter(subjects=subjects)
    mods = _mods(e["modalities"])
    records = []
    for m in mods:
        spec = evalproto.ProtocolSpec("single", (m,), (m,))
        gal, probes, _ = evalproto.build_protocol(test_man, spec)
        records += evalproto.extract_embeddings(model, root, gal, (m,))
        for groups in probes.values():
            records += evalproto.extract_embeddings(model, root, groups, (m,))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evalproto.save_embeddings(
        out, records, f"split={e['split']}",
        evalproto.file_hash(args.checkpoint), model.config.c3,
        model.config.parts)
    log.info("exported %d embeddings to %s", len(records), out)
    return 0


def cmd_report_matrix(args):
    cfg = load_config(args.config, args.set, args.seed)
    _log_resolved(cfg, ["eval"])
    e = cfg["eval"]
    root = Path(args.data)
    manifest = _load_manifest(root)
    model, _, _, _ = trainer.load_checkpoint(args.checkpoint)
    mods = _mods(e["modalities"])
    with OutputLock(args.out):
        reports = evalproto.run_matrix(
            model, manifest, root, mods,
            test_subjects=_test_subjects(root, e["split"]))
        files = evalproto.export_matrix_csv(reports, args.out, mods)
    for f in files:
        log.info("wrote %s", f)
    return 0


# --- argument plumbing ----------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(
        prog="gaitkit",
        description="multi-modal gait recognition toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False, out=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a config entry")
        p.add_argument("--seed", type=int, help="override every seed")
        if data:
            p.add_argument("--data", required=True, help="dataset root")
        if ckpt:
            p.add_argument("--checkpoint", required=True,
                           help="model checkpoint")
        if out:
            p.add_argument("--out", required=True, help="output path")

    common(sub.add_parser("synth-gen", help="generate a synthetic dataset"))
    pp = sub.add_parser("preprocess", help="derive modalities from raw data")
    common(pp, out=False)
    pp.add_argument("--root", required=True, help="dataset root to process")
    tr = sub.add_parser("train", help="train a model")
    common(tr, data=True)
    tr.add_argument("--resume", help="checkpoint to resume from")
    ev = sub.add_parser("eval", help="run a retrieval protocol")
    common(ev)
    ev.add_argument("--data", help="dataset root")
    ev.add_argument("--checkpoint", help="model checkpoint")
    ev.add_argument("--embeddings", help="evaluate exported embeddings "
                                         "instead of running the model")
    ex = sub.add_parser("export-embeddings",
                        help="write test-split embeddings to a file")
    common(ex, data=True, ckpt=True)
    rm = sub.add_parser("report-matrix",
                        help="probe x gallery modality matrices")
    common(rm, data=True, ckpt=True)
    return ap


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth-gen": cmd_synth_gen,
        "preprocess": cmd_preprocess,
        "train": cmd_train,
        "eval": cmd_eval,
        "export-embeddings": cmd_export_embeddings,
        "report-matrix": cmd_report_matrix,
    }
    try:
        if args.command == "eval" and not args.embeddings:
            if not args.data or not args.checkpoint:
                parser.error("eval needs --data and --checkpoint "
                             "(or --embeddings)")
        return handlers[args.command](args)
    except errors.ConfigKeyError as exc:
        print(f"gaitkit: config error: {exc}", file=sys.stderr)
        return 2
    except errors.GaitError as exc:
        print(f"gaitkit: error: {exc.__class__.__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
