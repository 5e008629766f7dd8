"""Training objectives and the finite-difference gradient-check harness.

All losses take post-sigmoid score maps as torch tensors so autograd provides
the analytic gradients; `grad_check` verifies them against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .geometry import Box
from .labeling import DegenerateTargetError, LocSampleSet, RegionMap, SoftTargetMap

SCORE_EPS = 1e-7   # clamp for post-sigmoid scores at the log boundaries
IOU_EPS = 1e-6     # clamp inside -log(IoU)


class TrainingFaultError(RuntimeError):
    """A loss term went NaN/Inf; training cannot continue."""


_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def _clamp_scores(scores: torch.Tensor) -> torch.Tensor:
    global _clamp_events
    out_of_range = (scores < SCORE_EPS) | (scores > 1.0 - SCORE_EPS)
    if bool(out_of_range.any()):
        _clamp_events += int(out_of_range.sum())
    return scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def _to_tensor(arr, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(arr, dtype=like.dtype, device=like.device)


def ladl_loss(scores: torch.Tensor, targets: SoftTargetMap, region: RegionMap) -> torch.Tensor:
    """Dynamic-label classification loss, averaged over all cells.

    Positive cells pay soft-target cross-entropy against the IoU-driven
    labels; negative cells pay -(1 + c) * log(1 - c), so confident negatives
    are re-weighted up by exactly the factor (1 + c).
    """
    c = _clamp_scores(scores)
    y = _to_tensor(targets.values, scores)
    pos = torch.as_tensor(region.positive_mask, device=scores.device)
    pos_term = -(y * torch.log(c) + (1.0 - y) * torch.log(1.0 - c))
    neg_term = -(1.0 + c) * torch.log(1.0 - c)
    return torch.where(pos, pos_term, neg_term).mean()


def cls_bce_loss(scores: torch.Tensor, targets: SoftTargetMap) -> torch.Tensor:
    """Plain cross-entropy over all cells; the baseline classification loss."""
    c = _clamp_scores(scores)
    y = _to_tensor(targets.values, scores)
    return -(y * torch.log(c) + (1.0 - y) * torch.log(1.0 - c)).mean()


def iou_overlap(boxes: torch.Tensor, gt: Box) -> torch.Tensor:
    """Differentiable IoU of (..., 4) corner-form boxes against one box."""
    iw = (torch.minimum(boxes[..., 2], torch.as_tensor(gt.x2, dtype=boxes.dtype))
          - torch.maximum(boxes[..., 0], torch.as_tensor(gt.x1, dtype=boxes.dtype))).clamp(min=0)
    ih = (torch.minimum(boxes[..., 3], torch.as_tensor(gt.y2, dtype=boxes.dtype))
          - torch.maximum(boxes[..., 1], torch.as_tensor(gt.y1, dtype=boxes.dtype))).clamp(min=0)
    inter = iw * ih
    areas = (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])
    return inter / (areas + gt.area() - inter)


def iou_loss(decoded: torch.Tensor, gt: Box, positive_mask: np.ndarray) -> torch.Tensor:
    """Mean -log(IoU) between decoded boxes and ground truth on positives."""
    mask = torch.as_tensor(np.asarray(positive_mask, dtype=bool), device=decoded.device)
    if not bool(mask.any()):
        raise DegenerateTargetError("iou_loss needs at least one positive cell")
    overlap = iou_overlap(decoded[mask], gt)
    return -torch.log(overlap.clamp(min=IOU_EPS)).mean()


def loc_loss(scores: torch.Tensor, samples: LocSampleSet) -> torch.Tensor:
    """BCE between localization scores and sampled IoU targets."""
    if len(samples.indices) == 0:
        raise DegenerateTargetError("empty localization sample set")
    idx = samples.indices
    c = _clamp_scores(scores[idx[:, 0], idx[:, 1]])
    t = _to_tensor(samples.targets, scores)
    return -(t * torch.log(c) + (1.0 - t) * torch.log(1.0 - c)).mean()


def centerness_target(offsets: np.ndarray) -> np.ndarray:
    """sqrt(min/max side-distance ratio product) for (..., 4) gt offsets."""
    l, t, r, b = (offsets[..., k] for k in range(4))
    return np.sqrt(
        (np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b))
    )


def centerness_loss(scores: torch.Tensor, offsets: np.ndarray, positive_mask: np.ndarray) -> torch.Tensor:
    """Baseline localization loss: BCE against center-proximity targets."""
    mask = np.asarray(positive_mask, dtype=bool)
    if not mask.any():
        raise DegenerateTargetError("centerness_loss needs at least one positive cell")
    tgt = _to_tensor(centerness_target(offsets[mask]), scores)
    c = _clamp_scores(scores[torch.as_tensor(mask, device=scores.device)])
    return -(tgt * torch.log(c) + (1.0 - tgt) * torch.log(1.0 - c)).mean()


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    reg: torch.Tensor
    loc: torch.Tensor
    total: torch.Tensor
    counts: dict = field(default_factory=dict)

    def detached(self) -> dict:
        return {
            "cls": float(self.cls.detach()),
            "reg": float(self.reg.detach()),
            "loc": float(self.loc.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(cls, reg, loc, lambda1: float = 1.0, lambda2: float = 1.0,
               counts: dict | None = None) -> LossBreakdown:
    """Weighted sum of the three terms; faults on non-finite parts."""
    parts = [torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
             for p in (cls, reg, loc)]
    for name, p in zip(("cls", "reg", "loc"), parts):
        if not bool(torch.isfinite(p)):
            raise TrainingFaultError(f"non-finite {name} loss: {float(p)}")
    cls, reg, loc = parts
    total = cls + lambda1 * reg + lambda2 * loc
    return LossBreakdown(cls, reg, loc, total, counts or {})


def grad_check(loss_fn: Callable[[], torch.Tensor], inputs: Sequence[torch.Tensor],
               step: float = 1e-5, floor: float = 1e-5) -> float:
    """Worst relative error between autograd and central finite differences.

    `inputs` are the leaf tensors `loss_fn` closes over; they are perturbed in
    place and restored.  `floor` sets the gradient magnitude below which the
    error is measured against the floor instead (keeps FD roundoff noise on
    near-zero gradients from dominating the report).
    """
    inputs = list(inputs)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(inputs, grads):
            flat = tensor.detach().reshape(-1)
            gflat = (torch.zeros_like(flat) if grad is None else grad.reshape(-1))
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                hi = float(loss_fn())
                flat[k] = orig - step
                lo = float(loss_fn())
                flat[k] = orig
                numeric = (hi - lo) / (2.0 * step)
                analytic = gflat[k].item()
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, rel)
    return worst


@dataclass
class GradCheckRow:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _decode_grid_torch(offsets: torch.Tensor, grid) -> torch.Tensor:
    """(H, W, 4) offsets -> corner boxes, differentiable in the offsets."""
    from .geometry import grid_points

    pts = torch.as_tensor(grid_points(grid).reshape(grid.height, grid.width, 2),
                          dtype=offsets.dtype)
    return torch.stack(
        [pts[..., 0] - offsets[..., 0], pts[..., 1] - offsets[..., 1],
         pts[..., 0] + offsets[..., 2], pts[..., 1] + offsets[..., 3]], dim=-1)


def gradient_suite(seed: int = 0, step: float = 1e-5,
                   loss_tol: float = 1e-4, model_tol: float = 1e-3) -> list[GradCheckRow]:
    """Finite-difference checks for every loss and the full objective.

    Loss gradients are checked at random interior scores on a small grid;
    the end-to-end row differentiates the total objective through a tiny
    double-precision model with the step's labels held fixed, which is the
    same function a training update sees.
    """
    from . import labeling
    from .geometry import Grid, encode_offset_map
    from .model import ModelConfig, SiamNet, STRIDE

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    grid = Grid.centered(7, STRIDE, 55)
    gt = Box(8.0, 6.0, 44.0, 40.0)
    cfg = labeling.LabelConfig()
    region = labeling.assign_regions(gt, grid, cfg)

    def rand_scores():
        return torch.tensor(rng.uniform(0.05, 0.95, size=(7, 7)),
                            dtype=torch.float64, requires_grad=True)

    rows = []

    decoded_np = gt.to_xyxy() + rng.uniform(-6, 6, size=(7, 7, 4))
    decoded_np[..., 2] = np.maximum(decoded_np[..., 2], decoded_np[..., 0] + 4)
    decoded_np[..., 3] = np.maximum(decoded_np[..., 3], decoded_np[..., 1] + 4)
    targets = labeling.build_cls_targets(region, decoded_np, gt, cfg)

    scores = rand_scores()
    rows.append(GradCheckRow(
        "ladl_loss", grad_check(lambda: ladl_loss(scores, targets, region), [scores], step), loss_tol))

    scores = rand_scores()
    binary = labeling.binary_cls_targets(region)
    rows.append(GradCheckRow(
        "cls_bce_loss", grad_check(lambda: cls_bce_loss(scores, binary), [scores], step), loss_tol))

    offsets = torch.tensor(rng.uniform(4.0, 24.0, size=(7, 7, 4)),
                           dtype=torch.float64, requires_grad=True)
    rows.append(GradCheckRow(
        "iou_loss",
        grad_check(lambda: iou_loss(_decode_grid_torch(offsets, grid), gt, region.positive_mask),
                   [offsets], step), loss_tol))

    scores = rand_scores()
    samples = labeling.sample_loc_targets(region, decoded_np, gt, rng)
    rows.append(GradCheckRow(
        "loc_loss", grad_check(lambda: loc_loss(scores, samples), [scores], step), loss_tol))

    scores = rand_scores()
    gt_offsets = encode_offset_map(grid, gt)
    rows.append(GradCheckRow(
        "centerness_loss",
        grad_check(lambda: centerness_loss(scores, gt_offsets, region.positive_mask),
                   [scores], step), loss_tol))

    # End-to-end: tiny double-precision model, labels frozen at the base point.
    # Train mode so BatchNorm uses batch statistics; with fresh running stats
    # an untrained eval-mode net can die at the first ReLU.
    model = SiamNet(ModelConfig(channels=2, template_size=23, search_size=55,
                                template_feat_crop=3, head_depth=1)).double().train()
    z = torch.tensor(rng.uniform(0, 1, size=(1, 3, 23, 23)), dtype=torch.float64)
    x = torch.tensor(rng.uniform(0, 1, size=(1, 3, 55, 55)), dtype=torch.float64)
    mgrid = model.grid
    mgt = Box(16.0, 12.0, 44.0, 40.0)
    mregion = labeling.assign_regions(mgt, mgrid, cfg)
    with torch.no_grad():
        base = model(z, x)
        base_boxes = model.decode_boxes(base.reg)
    base_np = base_boxes[0].numpy()
    mtargets = labeling.build_cls_targets(mregion, base_np, mgt, cfg)
    msamples = labeling.sample_loc_targets(mregion, base_np, mgt, rng)

    def objective():
        out = model(z, x, agg_boxes=base_boxes)
        decoded = model.decode_boxes(out.reg)
        breakdown = total_loss(
            ladl_loss(out.cls[0, 0], mtargets, mregion),
            iou_loss(decoded[0], mgt, mregion.positive_mask),
            loc_loss(out.loc[0, 0], msamples))
        return breakdown.total

    rows.append(GradCheckRow(
        "total_objective_model",
        grad_check(objective, [p for p in model.parameters() if p.requires_grad], step),
        model_tol))
    return rows
