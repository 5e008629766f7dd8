"""Frame-to-frame inference: crops, score combination, and the track loop.

The template is embedded once from the first frame; every later frame is
cropped around the previous box, scored by the network, re-ranked with a
scale-change penalty and a cosine window, and the top-n boxes are averaged
into the new prediction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Box
from .model import SiamNet, preprocess


class DataError(ValueError):
    """Sequence directory, ground-truth file, or results file is malformed."""


@dataclass
class PostProcessConfig:
    window_influence: float = 0.40
    penalty_k: float = 0.04
    top_n: int = 3
    template_size: int = 127
    search_size: int = 255
    context_amount: float = 0.5
    size_lr: float = 1.0  # <1 smooths predicted sizes toward the previous box

    def __post_init__(self):
        if not 0.0 <= self.window_influence <= 1.0:
            raise ValueError("window_influence must be in [0, 1]")
        if self.penalty_k <= 0:
            raise ValueError("penalty_k must be positive")
        if self.top_n < 1:
            raise ValueError("top_n must be at least 1")
        if not 0.0 < self.size_lr <= 1.0:
            raise ValueError("size_lr must be in (0, 1]")


@dataclass(frozen=True)
class CropWindow:
    """Square frame window resampled to a fixed-size crop.

    Crop pixel u maps to frame coordinate center + (u - (out-1)/2) / scale,
    with scale = out_size / side (crop pixels per frame pixel).
    """

    cx: float
    cy: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        return self.out_size / self.side

    def to_frame_box(self, box: Box) -> Box:
        half = (self.out_size - 1) / 2
        return Box(self.cx + (box.x1 - half) / self.scale,
                   self.cy + (box.y1 - half) / self.scale,
                   self.cx + (box.x2 - half) / self.scale,
                   self.cy + (box.y2 - half) / self.scale)

    def to_crop_box(self, box: Box) -> Box:
        half = (self.out_size - 1) / 2
        return Box((box.x1 - self.cx) * self.scale + half,
                   (box.y1 - self.cy) * self.scale + half,
                   (box.x2 - self.cx) * self.scale + half,
                   (box.y2 - self.cy) * self.scale + half)

    def to_frame_boxes(self, boxes: np.ndarray) -> np.ndarray:
        """Vectorized to_frame_box over an (..., 4) corner array."""
        half = (self.out_size - 1) / 2
        out = (boxes - half) / self.scale
        out[..., 0::2] += self.cx
        out[..., 1::2] += self.cy
        return out


def _check_box_in_frame(frame: np.ndarray, box: Box):
    h, w = frame.shape[:2]
    if box.x2 <= 0 or box.y2 <= 0 or box.x1 >= w or box.y1 >= h:
        raise ValueError(f"box {box} lies entirely outside the {w}x{h} frame")
    if box.area() <= 0:
        raise ValueError(f"cannot crop around a zero-area box: {box}")


def crop_window(frame: np.ndarray, window: CropWindow) -> np.ndarray:
    """Bilinear resample of a square frame window; outside pixels take the
    frame's per-channel mean color."""
    img = np.asarray(frame, dtype=np.float32)
    h, w = img.shape[:2]
    mean = img.reshape(-1, img.shape[2]).mean(axis=0)
    offs = (np.arange(window.out_size) - (window.out_size - 1) / 2) / window.scale
    xs = window.cx + offs
    ys = window.cy + offs
    gx, gy = np.meshgrid(xs, ys)

    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = (gx - x0)[..., None]
    fy = (gy - y0)[..., None]

    def at(ix, iy):
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        vals = img[np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
        vals = np.where(inside[..., None], vals, mean)
        return vals

    out = (at(x0, y0) * (1 - fx) * (1 - fy) + at(x0 + 1, y0) * fx * (1 - fy)
           + at(x0, y0 + 1) * (1 - fx) * fy + at(x0 + 1, y0 + 1) * fx * fy)
    return out.astype(np.float32)


def _context_side(box: Box, context_amount: float) -> float:
    ctx = context_amount * (box.w + box.h)
    return float(np.sqrt((box.w + ctx) * (box.h + ctx)))


def crop_template(frame: np.ndarray, box: Box, cfg: PostProcessConfig) -> np.ndarray:
    """Context-padded square template crop centered on the box."""
    _check_box_in_frame(frame, box)
    side = _context_side(box, cfg.context_amount)
    window = CropWindow(box.cx, box.cy, side, cfg.template_size)
    return crop_window(frame, window)


def crop_search(frame: np.ndarray, box: Box, cfg: PostProcessConfig) -> tuple[np.ndarray, CropWindow]:
    """Search crop around the previous box; the returned window carries the
    scale factor that maps predictions back to frame coordinates."""
    _check_box_in_frame(frame, box)
    side = _context_side(box, cfg.context_amount) * cfg.search_size / cfg.template_size
    window = CropWindow(box.cx, box.cy, side, cfg.search_size)
    return crop_window(frame, window), window


def cosine_window(size: int) -> np.ndarray:
    """Outer product of Hann windows; 1 at the map center, 0 at the rim."""
    hann = np.hanning(size)
    return np.outer(hann, hann)


def _padded_size(w, h):
    ctx = (w + h) / 2
    return np.sqrt((w + ctx) * (h + ctx))


def scale_penalty(prev_box: Box, candidates: np.ndarray, k: float) -> np.ndarray:
    """Penalty exp(-k * (aspect-change * size-change - 1)) per candidate.

    Equal to 1 exactly when aspect ratio and context-padded size both match
    the previous box.  Degenerate candidate dimensions are clamped to 1 px.
    """
    if k <= 0:
        raise ValueError("penalty factor k must be positive")
    cand = np.asarray(candidates, dtype=np.float64)
    cw = np.maximum(cand[..., 2] - cand[..., 0], 1.0)
    ch = np.maximum(cand[..., 3] - cand[..., 1], 1.0)
    pw = max(prev_box.w, 1.0)
    ph = max(prev_box.h, 1.0)
    r, rp = ch / cw, ph / pw
    s, sp = _padded_size(cw, ch), _padded_size(pw, ph)
    change = np.maximum(r / rp, rp / r) * np.maximum(s / sp, sp / s)
    return np.exp(-k * (change - 1.0))


def combine_scores(cls: np.ndarray, loc: np.ndarray, penalty: np.ndarray,
                   window: np.ndarray, window_influence: float) -> np.ndarray:
    """s = (1 - w) * cls * loc * penalty + w * window, elementwise."""
    if not 0.0 <= window_influence <= 1.0:
        raise ValueError("window_influence must be in [0, 1]")
    if not (cls.shape == loc.shape == penalty.shape == window.shape):
        raise ValueError("score map shapes must match")
    return (1.0 - window_influence) * cls * loc * penalty + window_influence * window


def select_box(scores: np.ndarray, candidates: np.ndarray, top_n: int) -> Box:
    """Coordinate-wise mean of the candidates at the top-n scores.

    Ties are broken by row-major cell order, so selection is deterministic.
    """
    if top_n < 1:
        raise ValueError("top_n must be at least 1")
    flat = scores.ravel()
    order = np.argsort(-flat, kind="stable")[:min(top_n, flat.size)]
    chosen = candidates.reshape(-1, 4)[order].mean(axis=0)
    return Box(*chosen)


@dataclass
class TrackerState:
    template_features: torch.Tensor
    prev_box: Box
    frame_index: int


class Tracker:
    """Single-sequence tracker; create one per sequence."""

    def __init__(self, model: SiamNet, cfg: PostProcessConfig | None = None):
        cfg = cfg or PostProcessConfig()
        if (cfg.template_size != model.cfg.template_size
                or cfg.search_size != model.cfg.search_size):
            raise ValueError("post-processing crop sizes disagree with the checkpoint "
                             f"({cfg.template_size}/{cfg.search_size} vs "
                             f"{model.cfg.template_size}/{model.cfg.search_size})")
        self.model = model.eval()
        self.cfg = cfg
        self.window = cosine_window(model.map_size)
        self.state: TrackerState | None = None

    def init(self, frame: np.ndarray, box: Box):
        crop = crop_template(frame, box, self.cfg)
        with torch.no_grad():
            z_feat = self.model.template(preprocess(crop))
        self.state = TrackerState(z_feat, box, 0)

    def update(self, frame: np.ndarray, collect_maps: bool = False):
        """Track one frame; returns (box, diagnostics[, maps])."""
        if self.state is None:
            raise RuntimeError("tracker not initialized; call init() first")
        st = self.state
        crop, win = crop_search(frame, st.prev_box, self.cfg)
        with torch.no_grad():
            out = self.model.track_forward(st.template_features, preprocess(crop))
            boxes_crop = self.model.decode_boxes(out.reg)
        cls = out.cls[0, 0].numpy().astype(np.float64)
        loc = out.loc[0, 0].numpy().astype(np.float64)
        cand_crop = boxes_crop[0].numpy().astype(np.float64)

        prev_scaled = Box.from_cxcywh(0.0, 0.0, max(st.prev_box.w, 1.0) * win.scale,
                                      max(st.prev_box.h, 1.0) * win.scale)
        penalty = scale_penalty(prev_scaled, cand_crop, self.cfg.penalty_k)
        combined = combine_scores(cls, loc, penalty, self.window,
                                  self.cfg.window_influence)
        box = select_box(combined, win.to_frame_boxes(cand_crop), self.cfg.top_n)

        if self.cfg.size_lr < 1.0:
            lr = self.cfg.size_lr
            box = Box.from_cxcywh(box.cx, box.cy,
                                  lr * box.w + (1 - lr) * st.prev_box.w,
                                  lr * box.h + (1 - lr) * st.prev_box.h)
        box = self._clip(box, frame.shape)

        best = int(np.argmax(combined))
        i, j = divmod(best, combined.shape[1])
        st.frame_index += 1
        st.prev_box = box
        diag = {
            "frame": st.frame_index,
            "score": float(combined[i, j]),
            "cell": [i, j],
            "cls": float(cls[i, j]),
            "loc": float(loc[i, j]),
        }
        if collect_maps:
            maps = {"cls": cls.astype(np.float32), "loc": loc.astype(np.float32),
                    "combined": combined.astype(np.float32)}
            return box, diag, maps
        return box, diag

    @staticmethod
    def _clip(box: Box, shape) -> Box:
        # keep the center inside the frame so the next search crop is legal
        h, w = shape[:2]
        cx = min(max(box.cx, 0.0), w - 1.0)
        cy = min(max(box.cy, 0.0), h - 1.0)
        bw = min(max(box.w, 2.0), 2.0 * w)
        bh = min(max(box.h, 2.0), 2.0 * h)
        return Box.from_cxcywh(cx, cy, bw, bh)


@dataclass
class TrackResult:
    boxes: list  # one Box per frame, the first being the given box
    diagnostics: list  # one record per frame; frame 0 carries null scores
    maps: dict | None = field(default=None)


def track_sequence(model: SiamNet, frames, init_box: Box,
                   cfg: PostProcessConfig | None = None,
                   collect_maps: bool = False) -> TrackResult:
    """Run the full loop over an in-memory sequence."""
    frames = list(frames)
    if not frames:
        raise ValueError("empty sequence")
    tracker = Tracker(model, cfg)
    tracker.init(frames[0], init_box)
    boxes = [init_box]
    diagnostics = [{"frame": 0, "score": None, "cell": None, "cls": None, "loc": None}]
    maps = {"cls": [], "loc": [], "combined": []} if collect_maps else None
    for frame in frames[1:]:
        if collect_maps:
            box, diag, frame_maps = tracker.update(frame, collect_maps=True)
            for key in maps:
                maps[key].append(frame_maps[key])
        else:
            box, diag = tracker.update(frame)
        boxes.append(box)
        diagnostics.append(diag)
    return TrackResult(boxes, diagnostics, maps)


# ---------------------------------------------------------------------------
# Sequence directories and results files.

_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def load_sequence(path: str) -> tuple[list[np.ndarray], list[Box]]:
    """Read an image-directory sequence with an OTB-style groundtruth.txt
    (one `x,y,w,h` line per frame; the first line initializes the tracker)."""
    from PIL import Image

    if not os.path.isdir(path):
        raise DataError(f"sequence directory not found: {path}")
    names = sorted(n for n in os.listdir(path)
                   if os.path.splitext(n)[1].lower() in _IMAGE_EXTS)
    if not names:
        raise DataError(f"no image files in {path}")
    gt_path = os.path.join(path, "groundtruth.txt")
    if not os.path.isfile(gt_path):
        raise DataError(f"missing groundtruth.txt in {path}")
    boxes = []
    with open(gt_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                x, y, w, h = (float(v) for v in line.split(","))
                boxes.append(Box.from_xywh(x, y, w, h))
            except ValueError as e:
                raise DataError(f"{gt_path}:{lineno}: bad ground-truth line: {line!r}") from e
    frames = [np.asarray(Image.open(os.path.join(path, n)).convert("RGB")) for n in names]
    if len(boxes) != len(frames):
        raise DataError(f"{path}: {len(frames)} frames but {len(boxes)} ground-truth lines")
    return frames, boxes


def results_records(result: TrackResult) -> list[dict]:
    records = []
    for box, diag in zip(result.boxes, result.diagnostics):
        records.append({"frame": diag["frame"], "box": list(box.to_xywh()),
                        "score": diag["score"], "cls": diag["cls"], "loc": diag["loc"]})
    return records


def write_results(path: str, records: list[dict]):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_results(path: str) -> list[dict]:
    records = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    rec["box"] = [float(v) for v in rec["box"]]
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise DataError(f"{path}:{lineno}: bad results record") from e
                records.append(rec)
    except OSError as e:
        raise DataError(f"cannot read results file {path}: {e}") from e
    if not records:
        raise DataError(f"empty results file: {path}")
    return records


def dump_score_maps(out_dir: str, maps: dict):
    """Write per-frame score maps as stacked .npy arrays plus a JSON header."""
    os.makedirs(out_dir, exist_ok=True)
    header = {"arrays": {}, "frames": len(next(iter(maps.values())))}
    for name, stack in maps.items():
        arr = np.stack(stack).astype(np.float32)
        fname = f"{name}.npy"
        np.save(os.path.join(out_dir, fname), arr)
        header["arrays"][name] = {"file": fname, "shape": list(arr.shape)}
    with open(os.path.join(out_dir, "scoremaps.json"), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
