"""Command line entry point: ``spiketrack {synth,train,track,eval,inspect}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("spiketrack")

MANIFEST_NAME = "manifest.json"


class CliError(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy
    import torch
    return {"spiketrack": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def write_manifest(path, command: str, args: argparse.Namespace, config: dict, inputs, outputs,
                   checkpoint=None) -> None:
    """Run record; no wall-clock fields so identical runs give identical manifests."""
    snap = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "args": snap,
        "config": config,
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "checkpoint": str(checkpoint) if checkpoint else None,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "versions": _versions(),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


# synth ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .events import write_events
    from .mot import write_mot
    from .synth import SceneSpec, generate, load_spec, save_spec, scenario

    if args.spec:
        try:
            spec = load_spec(args.spec)
        except (OSError, ValueError, TypeError, KeyError) as err:
            raise CliError(f"bad scene spec {args.spec}: {err}") from None
        if args.seed is not None:
            spec = SceneSpec(**{**spec.__dict__, "seed": args.seed})
    else:
        try:
            spec = scenario(args.scenario, args.seed or 0)
        except KeyError as err:
            raise CliError(str(err.args[0])) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events, gt = generate(spec)
    paths = [out / "events.evb", out / "gt.csv", out / "spec.json"]
    write_events(events, paths[0])
    write_mot(paths[1], gt)
    save_spec(spec, paths[2])
    write_manifest(out / MANIFEST_NAME, "synth", args, spec.to_dict(), [args.spec] if args.spec else [], paths)
    print(f"{len(events)} events, {len(gt.ids())} tracks, {len(gt)} gt rows -> {out}")
    return 0


# train ---------------------------------------------------------------------------

def _scene_dirs(roots) -> list[Path]:
    out = []
    for root in roots:
        root = Path(root)
        if (root / "spec.json").exists():
            out.append(root)
        else:
            found = sorted(p.parent for p in root.glob("*/spec.json"))
            if not found:
                raise CliError(f"no scene data under {root} (expected spec.json, events.evb, gt.csv)")
            out.extend(found)
    return out


def cmd_train(args) -> int:
    from .events import read_events
    from .mot import read_mot
    from .synth import load_spec
    from .training import (
        SceneDataset, TrainingAborted, parse_config_text, resolve_config, train, training_specs,
    )

    file_values = {}
    if args.config:
        try:
            file_values = parse_config_text(Path(args.config).read_text())
        except (OSError, ValueError) as err:
            raise CliError(f"config {args.config}: {err}") from None
    overrides = {"epochs": args.epochs, "steps_per_epoch": args.steps_per_epoch, "batch_size": args.batch_size,
                 "neuron": args.neuron, "voxel_bins": args.voxel_bins, "seed": args.seed,
                 "backbone": args.backbone, "lr_start": args.lr}
    try:
        cfg = resolve_config(file_values, overrides)
    except (TypeError, ValueError) as err:
        raise CliError(f"bad training config: {err}") from None
    inputs = []
    if args.data:
        scenes = []
        for d in _scene_dirs(args.data):
            paths = [d / "spec.json", d / "events.evb", d / "gt.csv"]
            scenes.append((load_spec(paths[0]), read_events(paths[1]), read_mot(paths[2])))
            inputs += paths
        dataset = SceneDataset(scenes, cfg.voxel_bins, cfg.granularity_us)
    else:
        dataset = SceneDataset.from_specs(training_specs(cfg), voxel_bins=cfg.voxel_bins,
                                          granularity_us=cfg.granularity_us)
    if not dataset.identities():
        raise CliError("training data holds no usable object tracks")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    try:
        train(cfg, dataset, out, loss_csv, resume=args.resume, max_steps=args.max_steps)
    except TrainingAborted as err:
        raise CliError(f"training aborted: {err}") from None
    if args.resume:
        inputs.append(Path(args.resume))
    write_manifest(out.with_suffix(".manifest.json"), "train", args, cfg.to_dict(), inputs, [out, loss_csv],
                   checkpoint=out)
    print(f"checkpoint -> {out}; loss curve -> {loss_csv}")
    return 0


# track ---------------------------------------------------------------------------

def cmd_track(args) -> int:
    from .events import read_events
    from .mot import read_mot, write_mot
    from .siamese import BackboneConfig, SiameseTracker
    from .tracker import FileDetections, OracleDetections, SiameseEstimator, TrackerConfig, run
    from .training import load_model

    events = read_events(args.events)
    cfg = TrackerConfig(voxel_bins=args.voxel_bins, gate_distance=args.gate, min_validate_score=args.min_score,
                        hold_on_flat_map=args.hold_on_flat_map)
    if args.detections:
        source = FileDetections(args.detections, cfg.tau_us)
        boxes = [d.box for f in source.frames.values() for d in f]
        det_path = args.detections
    else:
        gt = read_mot(args.oracle)
        source = OracleDetections(gt, cfg.tau_us, args.sigma, args.p_drop, args.seed or 0)
        boxes = [r.box for r in gt]
        det_path = args.oracle
    off = [b for b in boxes if b.right <= 0 or b.bottom <= 0 or b.left >= events.width or b.top >= events.height]
    if off:
        raise CliError(f"geometry mismatch: {len(off)} detection boxes lie outside the "
                       f"{events.width}x{events.height} sensor")
    if args.checkpoint:
        model, meta, _ = load_model(args.checkpoint)
    else:
        log.warning("no checkpoint given; using an untrained miniature estimator")
        model = SiameseTracker(BackboneConfig.miniature(), seed=args.seed or 0)
    estimator = SiameseEstimator(model, cfg.template_context, cfg.search_context, cfg.hold_on_flat_map)
    n_frames = args.frames
    if n_frames is None and len(events):
        n_frames = int(events.t[-1]) // cfg.tau_us + 1
        n_frames = min(n_frames, source.n_frames) if source.n_frames else 0
    result = run(events, source, cfg, estimator, n_frames=n_frames)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mot(out, result)
    inputs = [args.events, det_path] + ([args.checkpoint] if args.checkpoint else [])
    import dataclasses
    write_manifest(out.with_suffix(".manifest.json"), "track", args, dataclasses.asdict(cfg), inputs, [out],
                   checkpoint=args.checkpoint)
    print(f"{len(result)} rows, {len(result.ids())} tracks -> {out}")
    return 0


# eval ----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .metrics import combined, format_keyvalue, format_table, sequence_counts
    from .mot import MotFormatError, read_mot

    if len(args.pairs) % 2:
        raise CliError("eval expects LOG GT pairs")
    reports, counts = {}, []
    for k in range(0, len(args.pairs), 2):
        log_path, gt_path = args.pairs[k], args.pairs[k + 1]
        try:
            pred, gt = read_mot(log_path), read_mot(gt_path)
        except MotFormatError as err:
            raise CliError(f"{log_path if k == 0 else gt_path}: {err}") from None
        c = sequence_counts(pred, gt, class_aware=not args.class_agnostic)
        counts.append(c)
        reports[Path(log_path).stem] = c.report()
    if len(counts) > 1:
        reports["COMBINED"] = combined(counts, pool=not args.mean)
    sys.stdout.write(format_table(reports))
    if args.out:
        Path(args.out).write_text(format_keyvalue(reports))
    return 0


# inspect -------------------------------------------------------------------------

def _save_png(arr: np.ndarray, path) -> None:
    from PIL import Image
    Image.fromarray(arr).save(path)


def _frame_png(frame: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` 0/1 event frame -> RGB image with events at full intensity."""
    return (np.moveaxis(frame, 0, -1) * 255).astype(np.uint8)


def cmd_inspect(args) -> int:
    from .events import read_events, render_event_frame, voxelize

    events = read_events(args.events)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_end = args.t_end if args.t_end is not None else (int(events.t[-1]) + 1 if len(events) else 0)
    summary = {"events": len(events), "width": events.width, "height": events.height}
    if len(events):
        span = max(int(events.t[-1]) - int(events.t[0]), 1)
        summary.update(positive=int(events.p.sum()), negative=int(len(events) - events.p.sum()),
                       t_first=int(events.t[0]), t_last=int(events.t[-1]), rate_per_s=len(events) * 1e6 / span)
    if args.target == "events":
        t0 = args.t_start if args.t_start is not None else (int(events.t[0]) if len(events) else 0)
        frame = render_event_frame(events, t0, t_end)
        _save_png(_frame_png(frame), out / "event_frame.png")
        summary["window"] = [t0, t_end]
    elif args.target == "voxel":
        vox = voxelize(events, t_end, args.bins, args.granularity)
        per_bin = vox.data.sum(axis=(0, 1, 2))
        summary["bin_popcount"] = per_bin.tolist()
        for b in range(vox.duration_bins):
            img = np.zeros((vox.height, vox.width, 3), np.uint8)
            img[..., 0] = vox.data[1, :, :, b] * 255
            img[..., 1] = vox.data[0, :, :, b] * 255
            _save_png(img, out / f"voxel_bin{b:03d}.png")
    elif args.target == "scoremap":
        summary.update(_scoremap(args, events, t_end, out))
    else:  # argparse restricts choices; kept for direct calls
        raise CliError(f"unknown inspect target {args.target!r}")
    text = json.dumps(summary, indent=2, sort_keys=True)
    (out / "summary.json").write_text(text + "\n")
    print(text)
    return 0


def _scoremap(args, events, t_end, out) -> dict:
    import torch

    from .events import Box, voxelize
    from .siamese import ScoreMap, decode_position
    from .tracker import SiameseEstimator, Tracklet
    from .training import load_model

    if not (args.checkpoint and args.box):
        raise CliError("scoremap needs --checkpoint and --box L,T,W,H")
    try:
        box = Box.from_ltwh(*(float(v) for v in args.box.split(",")))
    except (TypeError, ValueError) as err:
        raise CliError(f"bad --box {args.box!r}: {err}") from None
    model, _, _ = load_model(args.checkpoint)
    est = SiameseEstimator(model)
    t_tmpl = args.template_t if args.template_t is not None else t_end
    _, feat = est.template(voxelize(events, t_tmpl, args.bins, args.granularity), box)
    new_box, peak, score = est.locate(Tracklet(0, box, template_feat=feat),
                                      voxelize(events, t_end, args.bins, args.granularity))
    v = score.values.numpy()
    span = float(v.max() - v.min()) or 1.0
    img = ((v - v.min()) / span * 255).astype(np.uint8)
    _save_png(np.kron(img, np.ones((8, 8), np.uint8)), out / "scoremap.png")
    np.savetxt(out / "scoremap.csv", v, delimiter=",", fmt="%.6f")
    return {"peak_score": peak, "box": list(new_box.ltwh())}


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spiketrack", description="Event-based multi-object tracking toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="intra-op threads (default: $SPIKETRACK_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--scenario", help="named scenario from the library")
    g.add_argument("--spec", help="scene spec JSON file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the Siamese estimator")
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--data", nargs="*", help="scene directories written by `synth` (default: built-in scenes)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-csv", help="loss curve path (default: next to the checkpoint)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, default=None, help="stop after this many steps in this run")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--neuron", choices=["srm", "lif", "none", "lstm"])
    t.add_argument("--backbone", choices=["miniature", "table1"])
    t.add_argument("--voxel-bins", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="run the tracker over an event file")
    k.add_argument("--events", required=True)
    d = k.add_mutually_exclusive_group(required=True)
    d.add_argument("--detections", help="detection CSV")
    d.add_argument("--oracle", help="groundtruth CSV used as the detector")
    k.add_argument("--checkpoint")
    k.add_argument("--out", required=True)
    k.add_argument("--voxel-bins", type=int, default=100)
    k.add_argument("--gate", type=float, default=None, help="gate distance in px (default 0.1 x diagonal)")
    k.add_argument("--min-score", type=float, default=0.30)
    k.add_argument("--hold-on-flat-map", action="store_true")
    k.add_argument("--p-drop", type=float, default=0.0)
    k.add_argument("--sigma", type=float, default=0.0, help="oracle centre jitter in px")
    k.add_argument("--frames", type=int, default=None)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score tracking logs against groundtruth")
    e.add_argument("pairs", nargs="+", metavar="LOG GT", help="one or more LOG GT pairs")
    e.add_argument("--out", help="key-value result file")
    e.add_argument("--class-agnostic", action="store_true")
    e.add_argument("--mean", action="store_true", help="combine sequences by averaging instead of pooling")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="render events, voxel slices or a score map")
    i.add_argument("target", choices=["events", "voxel", "scoremap"])
    i.add_argument("--events", required=True)
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--t-start", type=int)
    i.add_argument("--t-end", type=int)
    i.add_argument("--bins", type=int, default=10)
    i.add_argument("--granularity", type=int, default=10_000)
    i.add_argument("--checkpoint")
    i.add_argument("--box")
    i.add_argument("--template-t", type=int)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    from .autodiff import set_threads

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    set_threads(args.threads)
    try:
        return args.func(args)
    except CliError as err:
        print(f"spiketrack {args.command}: error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"spiketrack {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
