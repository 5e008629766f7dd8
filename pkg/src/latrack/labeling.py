"""Classification and localization training targets.

Positive cells get soft labels driven by the IoU between each cell's decoded
box and the ground truth, squashed through a sigmoid and optionally smoothed
for boundary cells; the localization branch is supervised with raw IoUs on a
1:1 positive/negative sample set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, Grid, grid_points, iou_many

NEGATIVE = 0
BOUNDARY_POS = 1
CENTER_POS = 2


class DegenerateTargetError(ValueError):
    """Ground truth covers no grid cell; the sample cannot supervise anything."""


@dataclass
class LabelConfig:
    """Knobs of the label pipeline; defaults follow the tuned operating point."""

    alpha: float = 0.5
    beta: float = 10.0
    lambda_boundary: float = 0.2
    center_shrink: float = 0.5
    normalize: bool = True
    # ablation toggles: soft IoU-driven labels, boundary cells as positives
    use_soft_labels: bool = True
    boundary_positive: bool = True


@dataclass
class RegionMap:
    """Per-cell sample category plus the smoothing exponent attached to it."""

    categories: np.ndarray  # (H, W) int, values in {NEGATIVE, BOUNDARY_POS, CENTER_POS}
    lambda_map: np.ndarray  # (H, W) float, 1 center / lambda_b boundary / 0 negative

    @property
    def positive_mask(self) -> np.ndarray:
        return self.categories > NEGATIVE

    @property
    def center_mask(self) -> np.ndarray:
        return self.categories == CENTER_POS

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.categories == BOUNDARY_POS

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.positive_mask))


@dataclass
class SoftTargetMap:
    """Soft classification labels in [0, 1]; mask marks the positive cells."""

    values: np.ndarray  # (H, W) float in [0, 1], zero on negatives
    mask: np.ndarray    # (H, W) bool


@dataclass
class LocSampleSet:
    """Cells sampled for the localization branch with their IoU targets."""

    indices: np.ndarray  # (N, 2) int rows of (i, j)
    targets: np.ndarray  # (N,) float in [0, 1]
    num_positive: int = field(default=0)


def assign_regions(gt: Box, grid: Grid, cfg: LabelConfig) -> RegionMap:
    """Split grid cells into center-positive / boundary-positive / negative.

    Cells whose point falls inside `gt` shrunk by `center_shrink` are center
    positives; the remaining cells inside `gt` are boundary positives (or
    negatives when `boundary_positive` is off).  Raises DegenerateTargetError
    when no cell lands inside the ground truth.
    """
    if gt.area() <= 0:
        raise DegenerateTargetError(f"ground truth has no area: {gt}")
    if not 0 < cfg.center_shrink <= 1:
        raise ValueError(f"center_shrink must be in (0, 1], got {cfg.center_shrink}")

    pts = grid_points(grid).reshape(grid.height, grid.width, 2)
    px, py = pts[..., 0], pts[..., 1]
    inside = (px >= gt.x1) & (px <= gt.x2) & (py >= gt.y1) & (py <= gt.y2)
    core = gt.shrink(cfg.center_shrink)
    center = inside & (px >= core.x1) & (px <= core.x2) & (py >= core.y1) & (py <= core.y2)

    categories = np.zeros((grid.height, grid.width), dtype=np.int64)
    if cfg.boundary_positive:
        categories[inside] = BOUNDARY_POS
    categories[center] = CENTER_POS

    if not np.any(categories > NEGATIVE):
        raise DegenerateTargetError(f"ground truth {gt} covers no grid cell")

    lam = np.zeros_like(categories, dtype=np.float64)
    lam[categories == BOUNDARY_POS] = cfg.lambda_boundary
    lam[categories == CENTER_POS] = 1.0
    return RegionMap(categories, lam)


def soft_label(iou, lam, alpha: float = 0.5, beta: float = 10.0):
    """IoU-driven soft label: sigmoid(beta * (iou - alpha)) ** (1 / lam).

    Monotone increasing in IoU with flattened ends; lam < 1 shrinks the label
    so boundary cells never outrank a center cell with the same IoU.  Accepts
    scalars or broadcastable arrays.
    """
    if np.any(np.asarray(lam) <= 0):
        raise ValueError("smoothing exponent lam must be positive")
    if beta <= 0:
        raise ValueError("beta must be positive")
    g = 1.0 / (1.0 + np.exp(-beta * (np.asarray(iou, dtype=np.float64) - alpha)))
    out = g ** (1.0 / np.asarray(lam, dtype=np.float64))
    return float(out) if np.isscalar(iou) and np.isscalar(lam) else out


# Diagnostic counter: how often min-max normalization hit a constant map.
_normalize_fallbacks = 0


def normalize_fallback_count() -> int:
    return _normalize_fallbacks


def normalize_labels(raw: SoftTargetMap) -> SoftTargetMap:
    """Min-max normalize masked labels to span [0, 1] exactly.

    A constant masked map (typical at the start of training, when every
    decoded box is equally bad) falls back to all-ones so positives still
    receive credit; the event is counted.
    """
    global _normalize_fallbacks
    if not np.any(raw.mask):
        raise ValueError("normalize_labels needs a non-empty mask")
    values = raw.values.astype(np.float64).copy()
    masked = values[raw.mask]
    lo, hi = masked.min(), masked.max()
    if hi == lo:
        _normalize_fallbacks += 1
        values[raw.mask] = 1.0
    else:
        values[raw.mask] = (masked - lo) / (hi - lo)
    values[~raw.mask] = 0.0
    return SoftTargetMap(values, raw.mask.copy())


def binary_cls_targets(region: RegionMap) -> SoftTargetMap:
    """Plain 0/1 labels from the region map (soft labels disabled)."""
    mask = region.positive_mask
    return SoftTargetMap(mask.astype(np.float64), mask)


def build_cls_targets(
    region: RegionMap, decoded: np.ndarray, gt: Box, cfg: LabelConfig
) -> SoftTargetMap:
    """Soft classification targets from per-cell decoded boxes.

    `decoded` is the (H, W, 4) corner-form map from the regression branch,
    treated as a constant (no gradient flows back through the labels).
    """
    if not cfg.use_soft_labels:
        return binary_cls_targets(region)
    mask = region.positive_mask
    if not np.any(mask):
        raise DegenerateTargetError("region map has no positive cell")
    values = np.zeros(mask.shape, dtype=np.float64)
    ious = iou_many(decoded[mask], gt)
    values[mask] = soft_label(ious, region.lambda_map[mask], cfg.alpha, cfg.beta)
    targets = SoftTargetMap(values, mask)
    if cfg.normalize:
        targets = normalize_labels(targets)
    return targets


def sample_loc_targets(
    region: RegionMap, decoded: np.ndarray, gt: Box, rng: np.random.Generator
) -> LocSampleSet:
    """IoU supervision cells for the localization branch.

    Every positive cell is kept; an equal number of negatives is drawn
    uniformly without replacement (all of them when fewer exist).  Targets are
    the IoUs of the decoded boxes at the sampled cells.
    """
    pos = np.argwhere(region.positive_mask)
    if len(pos) == 0:
        raise DegenerateTargetError("no positive cell to supervise")
    neg = np.argwhere(~region.positive_mask)
    n_neg = min(len(pos), len(neg))
    if n_neg > 0:
        pick = rng.choice(len(neg), size=n_neg, replace=False)
        pick.sort()
        idx = np.concatenate([pos, neg[pick]], axis=0)
    else:
        idx = pos
    targets = iou_many(decoded[idx[:, 0], idx[:, 1]], gt)
    return LocSampleSet(idx, targets, num_positive=len(pos))
