"""Synthetic sequences, training pairs, and the optimization loop."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import labeling, losses
from .geometry import Box, encode_offset_map
from .model import ModelConfig, SiamNet, preprocess, save_checkpoint, capture_rng_state
from .tracker import PostProcessConfig, crop_search, crop_template

_SHAPES = ("rect", "ellipse", "textured", "mixed")


@dataclass
class SyntheticConfig:
    """Moving-shape sequences standing in for real training footage."""

    canvas: int = 160
    num_frames: int = 40
    shape: str = "mixed"
    speed: float = 3.0
    jitter: float = 1.0
    scale_min: float = 0.97
    scale_max: float = 1.03
    size_min: float = 24.0
    size_max: float = 48.0
    distractors: int = 2
    occlusion_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ValueError(f"shape must be one of {_SHAPES}, got {self.shape!r}")
        if self.canvas < 32 or self.num_frames < 1:
            raise ValueError("canvas must be >= 32 px and num_frames >= 1")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")
        if not 4 <= self.size_min <= self.size_max:
            raise ValueError("need 4 <= size_min <= size_max")
        if self.speed < 0 or self.jitter < 0 or self.distractors < 0:
            raise ValueError("speed, jitter and distractors must be nonnegative")
        if not 0 <= self.occlusion_prob <= 1:
            raise ValueError("occlusion_prob must be in [0, 1]")


@dataclass
class TrainConfig:
    """Desk-scale defaults; the full-scale recipe (50 epochs, freeze 5,
    batch 128, lr 5e-3 -> 1e-5) remains legal config."""

    epochs: int = 10
    steps_per_epoch: int = 200
    batch_size: int = 16
    freeze_epochs: int = 1
    lr_start: float = 5e-3
    lr_end: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.5
    beta: float = 10.0
    lambda_boundary: float = 0.2
    center_shrink: float = 0.5
    normalize_labels: bool = True
    use_ladl: bool = True
    use_lals: bool = True
    use_lafa: bool = True
    channels: int = 32
    template_size: int = 127
    search_size: int = 255
    template_feat_crop: int = 8
    head_depth: int = 2
    num_sequences: int = 8
    aug_shift: float = 16.0
    aug_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")
        if not 0 <= self.freeze_epochs <= self.epochs:
            raise ValueError("freeze_epochs must be in [0, epochs]")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            template_size=self.template_size,
            search_size=self.search_size,
            template_feat_crop=self.template_feat_crop,
            head_depth=self.head_depth,
            loc_mode="lafa" if self.use_lafa else "centerness",
        )

    def label_config(self) -> labeling.LabelConfig:
        return labeling.LabelConfig(
            alpha=self.alpha,
            beta=self.beta,
            lambda_boundary=self.lambda_boundary,
            center_shrink=self.center_shrink,
            normalize=self.normalize_labels,
            use_soft_labels=self.use_ladl,
            boundary_positive=self.use_lals,
        )

    def crop_config(self) -> PostProcessConfig:
        return PostProcessConfig(template_size=self.template_size,
                                 search_size=self.search_size)


@dataclass
class _Sprite:
    kind: str
    color: np.ndarray
    color2: np.ndarray
    cx: float
    cy: float
    vx: float
    vy: float
    w0: float
    h0: float
    scale: float = 1.0

    def box(self) -> Box:
        return Box.from_cxcywh(self.cx, self.cy, self.w0 * self.scale, self.h0 * self.scale)


def _draw_sprite(img: np.ndarray, sp: _Sprite):
    h, w = img.shape[:2]
    b = sp.box()
    x1, y1 = max(int(round(b.x1)), 0), max(int(round(b.y1)), 0)
    x2, y2 = min(int(round(b.x2)), w), min(int(round(b.y2)), h)
    if x2 <= x1 or y2 <= y1:
        return
    if sp.kind == "rect":
        img[y1:y2, x1:x2] = sp.color
    elif sp.kind == "ellipse":
        ys, xs = np.mgrid[y1:y2, x1:x2]
        rx, ry = max(b.w / 2, 1e-6), max(b.h / 2, 1e-6)
        mask = ((xs + 0.5 - b.cx) / rx) ** 2 + ((ys + 0.5 - b.cy) / ry) ** 2 <= 1.0
        img[y1:y2, x1:x2][mask] = sp.color
    else:  # textured: checkerboard anchored to the box corner
        ys, xs = np.mgrid[y1:y2, x1:x2]
        cell = max(2, int(round(min(b.w, b.h) / 5)))
        checker = ((xs - int(round(b.x1))) // cell + (ys - int(round(b.y1))) // cell) % 2
        img[y1:y2, x1:x2] = np.where(checker[..., None] == 0, sp.color, sp.color2)


def _bounce(sp: _Sprite, canvas: int):
    half_w, half_h = sp.w0 * sp.scale / 2, sp.h0 * sp.scale / 2
    if sp.cx - half_w < 1:
        sp.cx = 1 + half_w
        sp.vx = abs(sp.vx)
    if sp.cx + half_w > canvas - 1:
        sp.cx = canvas - 1 - half_w
        sp.vx = -abs(sp.vx)
    if sp.cy - half_h < 1:
        sp.cy = 1 + half_h
        sp.vy = abs(sp.vy)
    if sp.cy + half_h > canvas - 1:
        sp.cy = canvas - 1 - half_h
        sp.vy = -abs(sp.vy)


def _new_sprite(cfg: SyntheticConfig, rng: np.random.Generator,
                base_color: np.ndarray | None = None) -> _Sprite:
    kind = cfg.shape if cfg.shape != "mixed" else rng.choice(("rect", "ellipse", "textured"))
    if base_color is None:
        color = rng.uniform(120, 240, size=3)
    else:
        # distractors stay close to the target's appearance
        color = np.clip(base_color + rng.normal(0, 30, size=3), 60, 255)
    color2 = np.clip(color + rng.uniform(-80, 80, size=3), 0, 255)
    w0 = rng.uniform(cfg.size_min, cfg.size_max)
    h0 = rng.uniform(cfg.size_min, cfg.size_max)
    margin = max(w0, h0) / 2 + 2
    angle = rng.uniform(0, 2 * np.pi)
    return _Sprite(kind=str(kind), color=color, color2=color2,
                   cx=rng.uniform(margin, cfg.canvas - margin),
                   cy=rng.uniform(margin, cfg.canvas - margin),
                   vx=cfg.speed * np.cos(angle), vy=cfg.speed * np.sin(angle),
                   w0=w0, h0=h0)


def gen_synthetic_sequence(cfg: SyntheticConfig) -> tuple[list[np.ndarray], list[Box]]:
    """Render a deterministic sequence; returns (frames, per-frame gt boxes).

    The target never leaves the canvas (it bounces off the walls); ground
    truth is the rendered object's box.  Distractors share the target's shape
    family and a similar color.
    """
    rng = np.random.default_rng(cfg.seed)
    bg = rng.uniform(20, 90, size=3) + rng.normal(0, 6, size=(cfg.canvas, cfg.canvas, 3))
    bg = np.clip(bg, 0, 255)
    target = _new_sprite(cfg, rng)
    others = [_new_sprite(cfg, rng, base_color=target.color) for _ in range(cfg.distractors)]

    frames, boxes = [], []
    max_scale = 0.45 * cfg.canvas / max(target.w0, target.h0)
    for _ in range(cfg.num_frames):
        img = bg.copy()
        for sp in others:
            _draw_sprite(img, sp)
        _draw_sprite(img, target)
        gt = target.box()
        if rng.uniform() < cfg.occlusion_prob:
            frac = rng.uniform(0.3, 0.6)
            side = int(rng.integers(4))
            occ = np.array([110.0, 110.0, 110.0])
            ob = [gt.x1, gt.y1, gt.x2, gt.y2]
            if side == 0:
                ob[2] = gt.x1 + frac * gt.w
            elif side == 1:
                ob[0] = gt.x2 - frac * gt.w
            elif side == 2:
                ob[3] = gt.y1 + frac * gt.h
            else:
                ob[1] = gt.y2 - frac * gt.h
            _draw_sprite(img, _Sprite("rect", occ, occ, (ob[0] + ob[2]) / 2,
                                      (ob[1] + ob[3]) / 2, 0, 0, ob[2] - ob[0], ob[3] - ob[1]))
        frames.append(np.clip(img, 0, 255).astype(np.uint8))
        boxes.append(gt)

        for sp in [target] + others:
            sp.cx += sp.vx + rng.normal(0, cfg.jitter) if cfg.jitter else sp.vx
            sp.cy += sp.vy + rng.normal(0, cfg.jitter) if cfg.jitter else sp.vy
            if sp is target:
                sp.scale = float(np.clip(sp.scale * rng.uniform(cfg.scale_min, cfg.scale_max),
                                         0.5, max_scale))
            _bounce(sp, cfg.canvas)
    return frames, boxes


def make_training_pair(frames: list[np.ndarray], boxes: list[Box],
                       rng: np.random.Generator, cfg: TrainConfig):
    """Template/search crop pair with a jittered search window.

    The search crop is taken around the ground truth perturbed in shift and
    scale, imitating an imperfect previous-frame box; returns the ground
    truth mapped into search-crop coordinates.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames for a training pair")
    crop_cfg = cfg.crop_config()
    i = int(rng.integers(len(frames)))
    j = int(rng.integers(len(frames) - 1))
    if j >= i:
        j += 1
    template = crop_template(frames[i], boxes[i], crop_cfg)
    gt = boxes[j]
    sf = math.exp(rng.uniform(-cfg.aug_scale, cfg.aug_scale))
    dx = rng.uniform(-cfg.aug_shift, cfg.aug_shift)
    dy = rng.uniform(-cfg.aug_shift, cfg.aug_shift)
    jittered = Box.from_cxcywh(gt.cx + dx, gt.cy + dy, gt.w * sf, gt.h * sf)
    search, window = crop_search(frames[j], jittered, crop_cfg)
    return template, search, window.to_crop_box(gt)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr_start through the freeze, then geometric decay down to lr_end."""
    if epoch < cfg.freeze_epochs:
        return cfg.lr_start
    span = cfg.epochs - cfg.freeze_epochs
    if span <= 1:
        return cfg.lr_start
    frac = (epoch - cfg.freeze_epochs) / (span - 1)
    return float(cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac)


@dataclass
class TrainResult:
    model: SiamNet
    final_path: str
    best_path: str
    metrics: list = field(default_factory=list)


def _sample_losses(out, decoded, gt, grid, cfg, label_cfg, data_rng, b):
    region = labeling.assign_regions(gt, grid, label_cfg)
    decoded_np = decoded[b].detach().numpy()
    targets = labeling.build_cls_targets(region, decoded_np, gt, label_cfg)
    if cfg.use_ladl:
        cls = losses.ladl_loss(out.cls[b, 0], targets, region)
    else:
        cls = losses.cls_bce_loss(out.cls[b, 0], targets)
    reg = losses.iou_loss(decoded[b], gt, region.positive_mask)
    if cfg.use_lafa:
        samples = labeling.sample_loc_targets(region, decoded_np, gt, data_rng)
        loc = losses.loc_loss(out.loc[b, 0], samples)
    else:
        loc = losses.centerness_loss(out.loc[b, 0], encode_offset_map(grid, gt),
                                     region.positive_mask)
    return cls, reg, loc


def train(cfg: TrainConfig, synth_cfg: SyntheticConfig, out_dir: str) -> TrainResult:
    """SGD with momentum on the combined objective.

    The backbone is frozen for the first `freeze_epochs`; the learning rate
    then decays geometrically from lr_start to lr_end.  Writes final/best
    checkpoints plus a JSON-lines metrics log.  A non-finite loss aborts with
    the last epoch checkpoint still on disk.
    """
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = SiamNet(cfg.model_config())
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr_start,
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    data_rng = np.random.default_rng(cfg.seed)
    sequences = [gen_synthetic_sequence(replace(synth_cfg, seed=synth_cfg.seed + k))
                 for k in range(cfg.num_sequences)]
    label_cfg = cfg.label_config()
    grid = model.grid
    config_echo = {**vars(synth_cfg), **vars(cfg)}

    final_path = os.path.join(out_dir, "final.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    metrics: list[dict] = []
    best_epoch_loss = math.inf
    step = 0
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as log:
        for epoch in range(cfg.epochs):
            lr = learning_rate(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            frozen = epoch < cfg.freeze_epochs
            for p in model.backbone.parameters():
                p.requires_grad_(not frozen)

            epoch_totals = []
            for _ in range(cfg.steps_per_epoch):
                zs, xs, gts = [], [], []
                for _ in range(cfg.batch_size):
                    frames, boxes = sequences[int(data_rng.integers(len(sequences)))]
                    z, x, gt = make_training_pair(frames, boxes, data_rng, cfg)
                    zs.append(z)
                    xs.append(x)
                    gts.append(gt)
                out = model(preprocess(np.stack(zs)), preprocess(np.stack(xs)))
                decoded = model.decode_boxes(out.reg)

                cls_terms, reg_terms, loc_terms = [], [], []
                for b, gt in enumerate(gts):
                    try:
                        cls, reg, loc = _sample_losses(out, decoded, gt, grid,
                                                       cfg, label_cfg, data_rng, b)
                    except labeling.DegenerateTargetError:
                        continue
                    cls_terms.append(cls)
                    reg_terms.append(reg)
                    loc_terms.append(loc)
                if not cls_terms:
                    continue
                breakdown = losses.total_loss(
                    torch.stack(cls_terms).mean(),
                    torch.stack(reg_terms).mean(),
                    torch.stack(loc_terms).mean(),
                    cfg.lambda1, cfg.lambda2,
                    counts={"samples": len(cls_terms)})
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                step += 1
                record = {"step": step, "lr": lr, **breakdown.detached()}
                log.write(json.dumps(record) + "\n")
                metrics.append(record)
                epoch_totals.append(record["total"])

            epoch_loss = float(np.mean(epoch_totals)) if epoch_totals else math.inf
            rng_state = capture_rng_state(data_rng)
            save_checkpoint(final_path, model, config_echo, rng_state)
            if epoch_loss < best_epoch_loss:
                best_epoch_loss = epoch_loss
                save_checkpoint(best_path, model, config_echo, rng_state)
    return TrainResult(model, final_path, best_path, metrics)
