"""One-pass-evaluation metrics, alignment diagnostics, and stability sweeps."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Box, iou
from .tracker import PostProcessConfig, track_sequence

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0.0, 51.0)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)


def _check_lengths(pred, gt):
    if len(pred) != len(gt):
        raise ValueError(f"prediction/ground-truth length mismatch: {len(pred)} vs {len(gt)}")
    if len(pred) == 0:
        raise ValueError("empty sequence")


def iou_series(pred: list[Box], gt: list[Box]) -> np.ndarray:
    _check_lengths(pred, gt)
    return np.array([iou(p, g) for p, g in zip(pred, gt)], dtype=np.float64)


def success_auc(pred: list[Box], gt: list[Box]) -> tuple[float, np.ndarray]:
    """Success rate over 21 IoU thresholds (strict >) and its mean (AUC)."""
    overlaps = iou_series(pred, gt)
    curve = np.array([(overlaps > t).mean() for t in SUCCESS_THRESHOLDS])
    return float(curve.mean()), curve


def center_distances(pred: list[Box], gt: list[Box]) -> np.ndarray:
    _check_lengths(pred, gt)
    return np.array([np.hypot(p.cx - g.cx, p.cy - g.cy) for p, g in zip(pred, gt)])


def precision(pred: list[Box], gt: list[Box], threshold: float = 20.0
              ) -> tuple[float, np.ndarray]:
    """Fraction of frames whose center error is within `threshold` pixels."""
    dist = center_distances(pred, gt)
    curve = np.array([(dist <= t).mean() for t in PRECISION_THRESHOLDS])
    return float((dist <= threshold).mean()), curve


def norm_precision(pred: list[Box], gt: list[Box], threshold: float = 0.2
                   ) -> tuple[float, np.ndarray]:
    """Precision with center errors divided per-axis by the gt box size."""
    _check_lengths(pred, gt)
    dist = np.array([
        np.hypot((p.cx - g.cx) / max(g.w, 1e-12), (p.cy - g.cy) / max(g.h, 1e-12))
        for p, g in zip(pred, gt)])
    curve = np.array([(dist <= t).mean() for t in NORM_PRECISION_THRESHOLDS])
    return float((dist <= threshold).mean()), curve


def pearson(x, y) -> float | None:
    """Pearson correlation; None when either series has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length series of >= 2 points")
    xm, ym = x - x.mean(), y - y.mean()
    denom = np.sqrt((xm * xm).sum() * (ym * ym).sum())
    if denom == 0.0:
        return None
    return float((xm * ym).sum() / denom)


def confidence_iou_correlation(records: list[dict], gt: list[Box],
                               source: str = "cls_loc"):
    """Per-frame (IoU, confidence) pairs and their Pearson correlation.

    Confidence defaults to the pre-window product cls * loc; `source="score"`
    uses the post-window combined score instead.  Frames without scores (the
    initialization frame) are skipped.  Returns (r_or_None, (N, 2) pairs).
    """
    _check_lengths(records, gt)
    pairs = []
    for rec, g in zip(records, gt):
        if rec.get("cls") is None or rec.get("loc") is None:
            continue
        conf = rec["score"] if source == "score" else rec["cls"] * rec["loc"]
        pairs.append((iou(Box.from_xywh(*rec["box"]), g), conf))
    pairs = np.array(pairs, dtype=np.float64).reshape(-1, 2)
    if len(pairs) < 3:
        raise ValueError("need at least 3 scored frames for a correlation")
    return pearson(pairs[:, 0], pairs[:, 1]), pairs


def boxes_from_records(records: list[dict]) -> list[Box]:
    return [Box.from_xywh(*rec["box"]) for rec in records]


@dataclass
class EvalReport:
    sequences: dict
    aggregate: dict
    curves: dict
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"sequences": self.sequences, "aggregate": self.aggregate,
                "curves": self.curves, "metadata": self.metadata}


def evaluate_sequence(records: list[dict], gt: list[Box]) -> dict:
    pred = boxes_from_records(records)
    auc, success_curve = success_auc(pred, gt)
    prec, prec_curve = precision(pred, gt)
    nprec, nprec_curve = norm_precision(pred, gt)
    try:
        r, _ = confidence_iou_correlation(records, gt)
    except ValueError:
        r = None
    return {
        "auc": auc, "precision": prec, "norm_precision": nprec,
        "pearson_r": r, "n_frames": len(pred),
        "_curves": {"success": success_curve, "precision": prec_curve,
                    "norm_precision": nprec_curve},
    }


def build_report(named_results: dict, metadata: dict | None = None) -> EvalReport:
    """Aggregate per-sequence metrics; `named_results` maps sequence name to
    (records, gt_boxes).  Aggregates are plain means over sequences."""
    if not named_results:
        raise ValueError("no sequences to evaluate")
    sequences = {}
    curve_stacks = {"success": [], "precision": [], "norm_precision": []}
    for name in sorted(named_results):
        records, gt = named_results[name]
        row = evaluate_sequence(records, gt)
        for key, curve in row.pop("_curves").items():
            curve_stacks[key].append(curve)
        sequences[name] = row
    rs = [row["pearson_r"] for row in sequences.values() if row["pearson_r"] is not None]
    aggregate = {
        "auc": float(np.mean([r["auc"] for r in sequences.values()])),
        "precision": float(np.mean([r["precision"] for r in sequences.values()])),
        "norm_precision": float(np.mean([r["norm_precision"] for r in sequences.values()])),
        "pearson_r": float(np.mean(rs)) if rs else None,
        "n_sequences": len(sequences),
    }
    curves = {
        "success": {"thresholds": SUCCESS_THRESHOLDS.tolist(),
                    "values": np.mean(curve_stacks["success"], axis=0).tolist()},
        "precision": {"thresholds": PRECISION_THRESHOLDS.tolist(),
                      "values": np.mean(curve_stacks["precision"], axis=0).tolist()},
        "norm_precision": {"thresholds": NORM_PRECISION_THRESHOLDS.tolist(),
                           "values": np.mean(curve_stacks["norm_precision"], axis=0).tolist()},
    }
    return EvalReport(sequences, aggregate, curves, metadata or {})


def write_report(report: EvalReport, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.as_dict(), f, indent=2, sort_keys=True)
    curve_dir = os.path.join(out_dir, "curves")
    os.makedirs(curve_dir, exist_ok=True)
    for name, curve in report.curves.items():
        with open(os.path.join(curve_dir, f"{name}.json"), "w") as f:
            json.dump(curve, f, indent=2, sort_keys=True)


def window_sweep(model, sequences: dict, w_values,
                 cfg: PostProcessConfig | None = None) -> list[dict]:
    """AUC as a function of window_influence.

    `sequences` maps name to (frames, gt_boxes); each w tracks every sequence
    and reports the mean AUC.  Results are merged in sorted sequence order so
    the table is deterministic.
    """
    cfg = cfg or PostProcessConfig(template_size=model.cfg.template_size,
                                   search_size=model.cfg.search_size)
    rows = []
    for w in w_values:
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"window_influence {w} outside [0, 1]")
        run_cfg = replace(cfg, window_influence=float(w))
        aucs = {}
        for name in sorted(sequences):
            frames, gt = sequences[name]
            result = track_sequence(model, frames, gt[0], run_cfg)
            aucs[name] = success_auc(result.boxes, gt)[0]
        rows.append({"w": float(w), "auc": float(np.mean(list(aucs.values()))),
                     "per_sequence": aucs})
    return rows
