"""Command-line entry point: train, track, eval, gradcheck, sweep, synth.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 numerical fault.  Failures
print a machine-readable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as cfglib
from . import evalkit, training
from .config import ConfigError
from .geometry import Box
from .losses import TrainingFaultError, gradient_suite
from .model import load_checkpoint
from .tracker import (DataError, dump_score_maps, load_sequence, read_results,
                      results_records, track_sequence, write_results)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


def _fail(kind: str, message) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--override", "-o", action="append", default=[],
                   metavar="KEY=VALUE", help="config override; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latrack",
                                     description="localization-aware Siamese tracker")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render synthetic sequences to disk")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="number of sequences")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a checkpoint on synthetic data")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over one sequence")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="results .jsonl path")
    p.add_argument("--dump-maps", help="directory for per-frame score maps")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracking results against ground truth")
    p.add_argument("--results", required=True, help="results file or directory")
    p.add_argument("--sequences", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--plot", action="store_true", help="also render curve PNGs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="AUC versus window_influence")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequences", required=True, help="sequence directory")
    p.add_argument("--w", default="0,0.1,0.2,0.3,0.4,0.5",
                   help="comma-separated window_influence values")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def _write_sequence(seq_dir: str, frames, boxes):
    from PIL import Image

    os.makedirs(seq_dir, exist_ok=True)
    for k, frame in enumerate(frames):
        Image.fromarray(frame).save(os.path.join(seq_dir, f"frame_{k:06d}.png"))
    with open(os.path.join(seq_dir, "groundtruth.txt"), "w") as f:
        for box in boxes:
            f.write(",".join(repr(float(v)) for v in box.to_xywh()) + "\n")


def cmd_synth(args) -> int:
    flat = cfglib.load_flat(args.config, args.override)
    cfg = cfglib.synthetic_config(flat)
    if args.count < 1:
        raise ConfigError("--count must be at least 1")
    for k in range(args.count):
        frames, boxes = training.gen_synthetic_sequence(replace(cfg, seed=cfg.seed + k))
        _write_sequence(os.path.join(args.out, f"seq_{k:03d}"), frames, boxes)
    print(json.dumps({"sequences": args.count, "out": args.out}))
    return EXIT_OK


def cmd_train(args) -> int:
    flat = cfglib.load_flat(args.config, args.override)
    train_cfg = cfglib.train_config(flat)
    synth_cfg = cfglib.synthetic_config(flat)
    result = training.train(train_cfg, synth_cfg, args.out)
    print(json.dumps({"final": result.final_path, "best": result.best_path,
                      "steps": len(result.metrics),
                      "last_total": result.metrics[-1]["total"] if result.metrics else None}))
    return EXIT_OK


def _postprocess_for(model, flat: dict):
    cfg = cfglib.postprocess_config(flat)
    # crop sizes always follow the checkpoint; the model was trained with them
    return replace(cfg, template_size=model.cfg.template_size,
                   search_size=model.cfg.search_size)


def cmd_track(args) -> int:
    flat = cfglib.load_flat(args.config, args.override)
    model, _ = load_checkpoint(args.checkpoint)
    cfg = _postprocess_for(model, flat)
    frames, gt = load_sequence(args.sequence)
    result = track_sequence(model, frames, gt[0], cfg,
                            collect_maps=args.dump_maps is not None)
    write_results(args.out, results_records(result))
    if args.dump_maps is not None:
        dump_score_maps(args.dump_maps, result.maps)
    print(json.dumps({"frames": len(result.boxes), "out": args.out}))
    return EXIT_OK


def _sequence_set(path: str) -> dict:
    """Map sequence name -> (frames, gt) for a sequence dir or a parent dir."""
    if not os.path.isdir(path):
        raise DataError(f"sequence directory not found: {path}")
    if os.path.isfile(os.path.join(path, "groundtruth.txt")):
        return {os.path.basename(os.path.normpath(path)): load_sequence(path)}
    out = {}
    for name in sorted(os.listdir(path)):
        sub = os.path.join(path, name)
        if os.path.isdir(sub) and os.path.isfile(os.path.join(sub, "groundtruth.txt")):
            out[name] = load_sequence(sub)
    if not out:
        raise DataError(f"no sequences under {path}")
    return out


def _results_set(path: str) -> dict:
    if os.path.isfile(path):
        name = os.path.splitext(os.path.basename(path))[0]
        return {name: read_results(path)}
    if os.path.isdir(path):
        out = {}
        for name in sorted(os.listdir(path)):
            if name.endswith(".jsonl"):
                out[os.path.splitext(name)[0]] = read_results(os.path.join(path, name))
        if out:
            return out
    raise DataError(f"no results found at {path}")


def cmd_eval(args) -> int:
    results = _results_set(args.results)
    sequences = _sequence_set(args.sequences)
    named = {}
    for name, records in results.items():
        if name not in sequences:
            raise DataError(f"results {name!r} has no matching sequence directory")
        named[name] = (records, sequences[name][1])
    report = evalkit.build_report(named, metadata={"results": args.results,
                                                   "sequences": args.sequences})
    evalkit.write_report(report, args.out)
    if args.plot:
        _plot_curves(report, args.out)
    print(json.dumps({"out": os.path.join(args.out, "report.json"),
                      "aggregate": report.aggregate}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = gradient_suite(seed=args.seed)
    ok = True
    print(f"{'loss':<26}{'max_rel_err':>14}{'tolerance':>12}  status")
    for row in rows:
        ok = ok and row.passed
        print(f"{row.name:<26}{row.max_rel_err:>14.3e}{row.tolerance:>12.1e}"
              f"  {'PASS' if row.passed else 'FAIL'}")
    if not ok:
        _fail("numerical", "gradient check exceeded tolerance")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_sweep(args) -> int:
    flat = cfglib.load_flat(args.config, args.override)
    model, _ = load_checkpoint(args.checkpoint)
    cfg = _postprocess_for(model, flat)
    try:
        w_values = [float(v) for v in args.w.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --w list: {args.w!r}") from e
    if not w_values:
        raise ConfigError("empty --w list")
    sequences = _sequence_set(args.sequences)
    rows = evalkit.window_sweep(model, sequences, w_values, cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.json"), "w") as f:
        json.dump({"rows": rows, "checkpoint": _file_digest(args.checkpoint)},
                  f, indent=2, sort_keys=True)
    for row in rows:
        print(f"w={row['w']:.2f}  auc={row['auc']:.4f}")
    if args.plot:
        _plot_sweep(rows, args.out)
    return EXIT_OK


def _file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _plot_curves(report, out_dir: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = os.path.join(out_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    labels = {"success": ("IoU threshold", "success rate"),
              "precision": ("center error (px)", "precision"),
              "norm_precision": ("normalized center error", "precision")}
    for name, curve in report.curves.items():
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(curve["thresholds"], curve["values"])
        ax.set_xlabel(labels[name][0])
        ax.set_ylabel(labels[name][1])
        ax.set_ylim(0, 1.05)
        fig.tight_layout()
        fig.savefig(os.path.join(plot_dir, f"{name}.png"), dpi=120)
        plt.close(fig)


def _plot_sweep(rows, out_dir: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r["w"] for r in rows], [r["auc"] for r in rows], marker="o")
    ax.set_xlabel("window_influence")
    ax.set_ylabel("AUC")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "sweep.png"), dpi=120)
    plt.close(fig)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        _fail("config", e)
        return EXIT_CONFIG
    except DataError as e:
        _fail("data", e)
        return EXIT_DATA
    except FileNotFoundError as e:
        _fail("data", e)
        return EXIT_DATA
    except TrainingFaultError as e:
        _fail("numerical", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
