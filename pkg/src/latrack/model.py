"""Siamese network with a localization-aware prediction head.

A small strided convnet embeds the 127-px template and 255-px search crops;
depthwise cross-correlation fuses them into a response map feeding three
branches: classification, box regression, and a separate localization-quality
branch built from position-embedded non-local attention plus five-point
box-feature aggregation.  The baseline center-proximity branch is kept as a
config toggle.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Grid, grid_points

STRIDE = 8
# (kernel, stride, padding) of the backbone layers; total stride 8
_BACKBONE_LAYERS = ((7, 2, 3), (3, 2, 1), (3, 2, 1), (3, 1, 1))


@dataclass
class ModelConfig:
    channels: int = 32
    template_size: int = 127
    search_size: int = 255
    template_feat_crop: int = 8
    head_depth: int = 2
    loc_mode: str = "lafa"  # "lafa" | "centerness"

    def __post_init__(self):
        if self.loc_mode not in ("lafa", "centerness"):
            raise ValueError(f"unknown loc_mode: {self.loc_mode}")


def feature_size(image_size: int) -> int:
    """Spatial size of the backbone output for a square input."""
    n = image_size
    for k, s, p in _BACKBONE_LAYERS:
        n = (n + 2 * p - k) // s + 1
    return n


def preprocess(images: np.ndarray) -> torch.Tensor:
    """(H,W,3) or (B,H,W,3) pixel arrays in [0, 255] -> float CHW in [0, 1]."""
    arr = np.asarray(images, dtype=np.float32) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def xcorr_depthwise(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Depthwise cross correlation: each kernel channel slides over its own
    x channel.  x (B,C,Hx,Wx), kernel (B,C,Hz,Wz) -> (B,C,Hx-Hz+1,Wx-Wz+1)."""
    if x.size(1) != kernel.size(1):
        raise ValueError(f"channel mismatch: {x.size(1)} vs {kernel.size(1)}")
    batch, channel = kernel.size(0), kernel.size(1)
    x = x.reshape(1, batch * channel, x.size(2), x.size(3))
    kernel = kernel.reshape(batch * channel, 1, kernel.size(2), kernel.size(3))
    out = F.conv2d(x, kernel, groups=batch * channel)
    return out.reshape(batch, channel, out.size(2), out.size(3))


def xcorr_full(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Plain correlation summed over channels, one output map per batch item.
    x (B,C,Hx,Wx), kernel (B,C,Hz,Wz) -> (B,1,Hx-Hz+1,Wx-Wz+1)."""
    if x.size(1) != kernel.size(1):
        raise ValueError(f"channel mismatch: {x.size(1)} vs {kernel.size(1)}")
    batch = kernel.size(0)
    x = x.reshape(1, -1, x.size(2), x.size(3))
    out = F.conv2d(x, kernel, groups=batch)
    return out.reshape(batch, 1, out.size(2), out.size(3))


def bilinear_sample(feat: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample feat (B,C,H,W) at fractional pixel coords px/py (B,N) -> (B,C,N).

    Coordinates are clamped to the feature extent, so sampling is total.
    """
    channels, height, width = feat.shape[1:]
    px = px.clamp(0, width - 1)
    py = py.clamp(0, height - 1)
    x0 = px.floor().clamp(0, width - 2)
    y0 = py.floor().clamp(0, height - 2)
    wx = (px - x0).unsqueeze(1)
    wy = (py - y0).unsqueeze(1)
    base = (y0.long() * width + x0.long())
    flat = feat.flatten(2)

    def gather(idx):
        return flat.gather(2, idx.unsqueeze(1).expand(-1, channels, -1))

    f00 = gather(base)
    f01 = gather(base + 1)
    f10 = gather(base + width)
    f11 = gather(base + width + 1)
    return (f00 * (1 - wx) * (1 - wy) + f01 * wx * (1 - wy)
            + f10 * (1 - wx) * wy + f11 * wx * wy)


def _crb_stack(channels: int, depth: int) -> nn.Sequential:
    layers = []
    for _ in range(depth):
        layers += [nn.Conv2d(channels, channels, 3, padding=1),
                   nn.ReLU(inplace=True),
                   nn.BatchNorm2d(channels)]
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    """Four-layer strided convnet shared by template and search streams."""

    def __init__(self, channels: int):
        super().__init__()
        layers = []
        in_ch = 3
        for k, s, p in _BACKBONE_LAYERS:
            layers += [nn.Conv2d(in_ch, channels, k, stride=s, padding=p),
                       nn.BatchNorm2d(channels),
                       nn.ReLU(inplace=True)]
            in_ch = channels
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class PositionEmbedding(nn.Module):
    """Single-channel template/search correlation expanded to feature width.

    The raw correlation map is batch-normalized before the 1x1 expansion so
    its magnitude matches the fused features it is added to.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(1)
        self.expand = nn.Conv2d(1, channels, 1)

    def forward(self, z_feat, x_feat):
        return self.expand(self.norm(xcorr_full(x_feat, z_feat)))


class LANonLocal(nn.Module):
    """Non-local attention whose queries and keys see a position embedding.

    y = f(softmax(q(x+p) k(x+p)^T) v(x)) + x with 1x1 projections; f starts
    at zero so the block is the identity at initialization.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.query = nn.Conv2d(channels, channels, 1)
        self.key = nn.Conv2d(channels, channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, p, return_attn: bool = False):
        if x.shape != p.shape:
            raise ValueError(f"position embedding shape {tuple(p.shape)} != input {tuple(x.shape)}")
        b, c, h, w = x.shape
        xp = x + p
        q = self.query(xp).flatten(2).transpose(1, 2)   # (B, N, C)
        k = self.key(xp).flatten(2)                     # (B, C, N)
        v = self.value(x).flatten(2).transpose(1, 2)    # (B, N, C)
        attn = torch.softmax(torch.bmm(q, k), dim=-1)   # rows over key positions
        y = torch.bmm(attn, v).transpose(1, 2).reshape(b, c, h, w)
        out = self.out(y) + x
        return (out, attn) if return_attn else out


class FeatureAggregation(nn.Module):
    """Gather features at the five named points of each cell's decoded box.

    Center, top-left, top-right, bottom-right, bottom-left features are
    bilinearly sampled in map coordinates, concatenated channel-wise, and
    fused with a 1x1 projection.
    """

    POINTS = 5

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Conv2d(self.POINTS * channels, channels, 1)

    def forward(self, feat: torch.Tensor, boxes: torch.Tensor, grid: Grid) -> torch.Tensor:
        b, c, h, w = feat.shape
        x1, y1, x2, y2 = boxes.unbind(-1)
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        pxs = torch.stack([cx, x1, x2, x2, x1], dim=1)  # (B, 5, H, W)
        pys = torch.stack([cy, y1, y1, y2, y2], dim=1)
        u = (pxs - grid.origin) / grid.stride
        v = (pys - grid.origin) / grid.stride
        sampled = bilinear_sample(feat, u.reshape(b, -1), v.reshape(b, -1))
        sampled = sampled.reshape(b, c, self.POINTS, h, w).permute(0, 2, 1, 3, 4)
        return self.fuse(sampled.reshape(b, self.POINTS * c, h, w))


@dataclass
class HeadOutputs:
    """Per-cell predictions; cls/loc post-sigmoid, reg nonnegative pixels."""

    cls: torch.Tensor  # (B, 1, H, W) in (0, 1)
    reg: torch.Tensor  # (B, 4, H, W) >= 0, (l, t, r, b) in search pixels
    loc: torch.Tensor  # (B, 1, H, W) in (0, 1)


class SiamNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        z_feat = feature_size(cfg.template_size)
        x_feat = feature_size(cfg.search_size)
        if cfg.template_feat_crop > z_feat:
            raise ValueError(f"template_feat_crop {cfg.template_feat_crop} exceeds "
                             f"template feature size {z_feat}")
        map_size = x_feat - cfg.template_feat_crop + 1
        if map_size < 2:
            raise ValueError("search crop too small for the configured template")
        self.grid = Grid.centered(map_size, STRIDE, cfg.search_size)

        c = cfg.channels
        self.backbone = Backbone(c)
        self.fuse = nn.Sequential(nn.Conv2d(c, c, 1), nn.BatchNorm2d(c), nn.ReLU(inplace=True))
        self.cls_tower = _crb_stack(c, cfg.head_depth)
        self.cls_head = nn.Conv2d(c, 1, 1)
        self.reg_tower = _crb_stack(c, cfg.head_depth)
        self.reg_head = nn.Conv2d(c, 4, 1)
        if cfg.loc_mode == "lafa":
            self.pos_embed = PositionEmbedding(c)
            self.attention = LANonLocal(c)
            self.aggregate = FeatureAggregation(c)
            self.loc_tower = _crb_stack(c, cfg.head_depth)
            self.loc_head = nn.Conv2d(c, 1, 1)
        else:
            self.cen_head = nn.Conv2d(c, 1, 1)

        pts = grid_points(self.grid).reshape(map_size, map_size, 2)
        self.register_buffer("_points", torch.as_tensor(pts), persistent=False)

    @property
    def map_size(self) -> int:
        return self.grid.height

    def features(self, images: torch.Tensor) -> torch.Tensor:
        size = images.shape[-1]
        if images.shape[-2] != size or size not in (self.cfg.template_size, self.cfg.search_size):
            raise ValueError(f"input size {tuple(images.shape[-2:])} is neither the "
                             f"{self.cfg.template_size}-px template nor the "
                             f"{self.cfg.search_size}-px search crop")
        return self.backbone(images)

    def template(self, z: torch.Tensor) -> torch.Tensor:
        """Template features center-cropped to the correlation kernel size."""
        if z.shape[-1] != self.cfg.template_size or z.shape[-2] != self.cfg.template_size:
            raise ValueError(f"template crop must be {self.cfg.template_size} px square")
        feat = self.backbone(z)
        full = feat.size(-1)
        crop = self.cfg.template_feat_crop
        lo = (full - crop) // 2
        return feat[..., lo:lo + crop, lo:lo + crop]

    def track_forward(self, z_feat: torch.Tensor, x: torch.Tensor,
                      agg_boxes: torch.Tensor | None = None) -> HeadOutputs:
        if x.shape[-1] != self.cfg.search_size or x.shape[-2] != self.cfg.search_size:
            raise ValueError(f"search crop must be {self.cfg.search_size} px square")
        x_feat = self.backbone(x)
        fused = self.fuse(xcorr_depthwise(x_feat, z_feat))
        cls_feat = self.cls_tower(fused)
        cls = torch.sigmoid(self.cls_head(cls_feat))
        reg = STRIDE * torch.exp(self.reg_head(self.reg_tower(fused)))
        if self.cfg.loc_mode == "lafa":
            p = self.pos_embed(z_feat, x_feat)
            attended = self.attention(fused, p)
            # boxes enter the gather as constants; regression trains only
            # through the IoU loss
            boxes = self.decode_boxes(reg) if agg_boxes is None else agg_boxes
            agg = self.aggregate(attended, boxes.detach(), self.grid)
            loc = torch.sigmoid(self.loc_head(self.loc_tower(agg)))
        else:
            loc = torch.sigmoid(self.cen_head(cls_feat))
        return HeadOutputs(cls, reg, loc)

    def forward(self, z: torch.Tensor, x: torch.Tensor,
                agg_boxes: torch.Tensor | None = None) -> HeadOutputs:
        return self.track_forward(self.template(z), x, agg_boxes=agg_boxes)

    def decode_boxes(self, reg: torch.Tensor) -> torch.Tensor:
        """(B,4,H,W) offsets -> (B,H,W,4) corner boxes in search pixels."""
        pts = self._points.to(reg.dtype)
        l, t, r, b = reg.unbind(1)
        return torch.stack([pts[..., 0] - l, pts[..., 1] - t,
                            pts[..., 0] + r, pts[..., 1] + b], dim=-1)


# ---------------------------------------------------------------------------
# Checkpoint container: magic + JSON header + raw little-endian arrays.
# Plain enough to round-trip byte-exactly, which torch.save does not promise.

CHECKPOINT_MAGIC = b"LATRACK1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "<u1"}


def capture_rng_state(data_rng: np.random.Generator | None = None) -> dict:
    state = {"torch": torch.get_rng_state().numpy().tobytes().hex()}
    if data_rng is not None:
        state["numpy"] = data_rng.bit_generator.state
    return state


def restore_rng_state(state: dict, data_rng: np.random.Generator | None = None):
    torch.set_rng_state(torch.frombuffer(bytes.fromhex(state["torch"]), dtype=torch.uint8).clone())
    if data_rng is not None and "numpy" in state:
        data_rng.bit_generator.state = state["numpy"]


def save_checkpoint(path: str, model: SiamNet, config: dict | None = None,
                    rng: dict | None = None) -> None:
    """Write model weights atomically (tmp file + rename)."""
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if str(arr.dtype) not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[str(arr.dtype)]).tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": 1,
        "config": {**asdict(model.cfg), **(config or {})},
        "arrays": entries,
        "rng": rng or capture_rng_state(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[SiamNet, dict]:
    """Rebuild the model from a checkpoint; returns (model, header)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode())
        blob = f.read()
    cfg_echo = header["config"]
    cfg = ModelConfig(**{k: cfg_echo[k] for k in
                         ("channels", "template_size", "search_size",
                          "template_feat_crop", "head_depth", "loc_mode")})
    model = SiamNet(cfg)
    state = {}
    for entry in header["arrays"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        state[entry["name"]] = torch.as_tensor(arr.astype(entry["dtype"]))
    model.load_state_dict(state)
    return model, header
