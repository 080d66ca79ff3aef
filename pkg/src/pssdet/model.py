"""Miniature FCOS detector with an attached positive-sample-selector head.

Layout: four stride-2 conv blocks, a three-level top-down pyramid built from
1x1 laterals and bilinear upsampling, classification/regression towers shared
across levels, and a small PSS head that reads the regression (or
classification) tower through an optional stop-gradient.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

PSS_PREFIX = "pss."


@dataclass
class DetectorConfig:
    num_classes: int = 3
    strides: tuple[int, ...] = (4, 8, 16)
    backbone_channels: tuple[int, ...] = (16, 32, 32, 32)
    convs_per_block: int = 2
    tower_depth: int = 2
    tower_channels: int = 32
    pss_depth: int = 2
    pss_channels: int = 32
    pss_branch: str = "regression"  # or "classification"
    use_centerness: bool = True
    use_stop_grad: bool = True
    with_pss: bool = True
    prior_prob: float = 0.01

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.pss_depth < 1:
            raise ValueError(f"pss_depth must be >= 1, got {self.pss_depth}")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if self.pss_branch not in ("regression", "classification"):
            raise ValueError(f"pss_branch must be 'regression' or 'classification', got {self.pss_branch!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        # stride 2**k comes out of backbone block k
        for s in self.strides:
            k = int(round(math.log2(s)))
            if 2 ** k != s or not 1 <= k <= len(self.backbone_channels):
                raise ValueError(f"stride {s} is not produced by a {len(self.backbone_channels)}-block backbone")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


@dataclass
class DetectorParams:
    config: DetectorConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self, pss: bool | None = None) -> list[str]:
        if pss is None:
            return list(self.arrays)
        return [n for n in self.arrays if n.startswith(PSS_PREFIX) == pss]

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


class LevelOutput(NamedTuple):
    stride: int
    cls: Tensor          # N x C x H x W logits
    reg: Tensor          # N x 4 x H x W, positive, in stride units
    ctr: Tensor | None   # N x 1 x H x W logits
    pss: Tensor | None   # N x 1 x H x W logits


class DetectorOutputs(NamedTuple):
    levels: list[LevelOutput]
    image_size: tuple[int, int]


def _layer_shapes(cfg: DetectorConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter, in initialisation order (FCOS part first, PSS last)."""
    shapes = []
    cin = 3
    for i, cout in enumerate(cfg.backbone_channels, start=1):
        for j in range(cfg.convs_per_block):
            shapes.append((f"backbone.b{i}.c{j}.w", (cout, cin, 3, 3)))
            shapes.append((f"backbone.b{i}.c{j}.b", (cout,)))
            cin = cout
    f = cfg.tower_channels
    for s in cfg.strides:
        k = int(round(math.log2(s)))
        shapes.append((f"fpn.lat{s}.w", (f, cfg.backbone_channels[k - 1], 1, 1)))
        shapes.append((f"fpn.lat{s}.b", (f,)))
    for branch in ("cls", "reg"):
        for j in range(cfg.tower_depth):
            shapes.append((f"head.{branch}_tower.{j}.w", (f, f, 3, 3)))
            shapes.append((f"head.{branch}_tower.{j}.b", (f,)))
    shapes.append(("head.cls_out.w", (cfg.num_classes, f, 3, 3)))
    shapes.append(("head.cls_out.b", (cfg.num_classes,)))
    shapes.append(("head.reg_out.w", (4, f, 3, 3)))
    shapes.append(("head.reg_out.b", (4,)))
    if cfg.use_centerness:
        shapes.append(("head.ctr_out.w", (1, f, 3, 3)))
        shapes.append(("head.ctr_out.b", (1,)))
    for s in cfg.strides:
        shapes.append((f"head.scale{s}", (1,)))
    if cfg.with_pss:
        cin = f
        for j in range(cfg.pss_depth - 1):
            shapes.append((f"{PSS_PREFIX}{j}.w", (cfg.pss_channels, cin, 3, 3)))
            shapes.append((f"{PSS_PREFIX}{j}.b", (cfg.pss_channels,)))
            cin = cfg.pss_channels
        shapes.append((f"{PSS_PREFIX}out.w", (1, cin, 3, 3)))
        shapes.append((f"{PSS_PREFIX}out.b", (1,)))
    return shapes


def build(config: DetectorConfig, seed: int = 0) -> DetectorParams:
    """Deterministic initialisation: uniform fan-in scaling, zero biases,
    focal prior on the classification and PSS output biases, unit level scales.

    The PSS head draws from its own child stream, so the FCOS part is
    identical whether or not the PSS head is built.
    """
    fcos_seed, pss_seed = np.random.SeedSequence(seed).spawn(2)
    rngs = {False: np.random.default_rng(fcos_seed), True: np.random.default_rng(pss_seed)}
    prior_bias = -math.log((1.0 - config.prior_prob) / config.prior_prob)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _layer_shapes(config):
        rng = rngs[name.startswith(PSS_PREFIX)]
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("head.scale"):
            arrays[name] = np.ones(shape)
        elif name in ("head.cls_out.b", f"{PSS_PREFIX}out.b"):
            arrays[name] = np.full(shape, prior_bias)
        else:
            arrays[name] = np.zeros(shape)
    return DetectorParams(config, arrays)


def feature_sizes(config: DetectorConfig, height: int, width: int) -> list[tuple[int, int]]:
    return [(height // s, width // s) for s in config.strides]


def anchor_points(level_strides, height: int, width: int):
    """Anchor centres flattened level-major then row-major.

    Returns (points (L, 2), per-anchor stride (L,), per-anchor level (L,)).
    """
    if isinstance(level_strides, DetectorConfig):
        level_strides = level_strides.strides
    pts, strides, levels = [], [], []
    for lvl, s in enumerate(level_strides):
        h, w = height // s, width // s
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        p = np.stack([xs.ravel() * s + s // 2, ys.ravel() * s + s // 2], axis=1).astype(np.float64)
        pts.append(p)
        strides.append(np.full(h * w, s, dtype=np.float64))
        levels.append(np.full(h * w, lvl, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(strides), np.concatenate(levels)


def _conv(x, p, name, stride=1, relu=True):
    w, b = p[name + ".w"], p[name + ".b"]
    y = ad.conv2d(x, w, b, stride=stride, padding=w.shape[2] // 2)
    return ad.relu(y) if relu else y


def forward(params: DetectorParams, image, tape: Tape | None = None,
            trainable: set[str] | None = None, watched: dict | None = None) -> DetectorOutputs:
    """Run the network on a 3xHxW image or an Nx3xHxW batch.

    With a tape, parameters in ``trainable`` (default: all) are watched so a
    later :func:`autodiff.backward` yields their gradients; the rest enter as
    constants. The watched leaf tensors are stored into ``watched`` by name.
    """
    cfg = params.config
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ad.DimensionError(f"expected a 3xHxW image or Nx3xHxW batch, got shape {x.shape}")
    n, _, height, width = x.shape
    top = 2 ** len(cfg.backbone_channels)
    if height % top or width % top:
        raise ad.DimensionError(f"image size {height}x{width} must be divisible by {top}")

    p: dict[str, Tensor] = {}
    for name, arr in params.arrays.items():
        if tape is not None and (trainable is None or name in trainable):
            p[name] = tape.watch(arr)
            if watched is not None:
                watched[name] = p[name]
        else:
            p[name] = Tensor(arr)

    feats = {}
    h: Tensor = Tensor(x)
    for i in range(1, len(cfg.backbone_channels) + 1):
        for j in range(cfg.convs_per_block):
            h = _conv(h, p, f"backbone.b{i}.c{j}", stride=2 if j == 0 else 1)
        feats[2 ** i] = h

    pyramid = {}
    prev = None
    for s in reversed(cfg.strides):
        lat = _conv(feats[s], p, f"fpn.lat{s}", relu=False)
        if prev is not None:
            up = prev
            while up.shape[2] < lat.shape[2]:
                up = ad.upsample2x(up)
            lat = lat + up
        pyramid[s] = lat
        prev = lat

    levels = []
    for s in cfg.strides:
        f = pyramid[s]
        ct = rt = f
        for j in range(cfg.tower_depth):
            ct = _conv(ct, p, f"head.cls_tower.{j}")
            rt = _conv(rt, p, f"head.reg_tower.{j}")
        cls = _conv(ct, p, "head.cls_out", relu=False)
        reg = ad.exp(_conv(rt, p, "head.reg_out", relu=False) * p[f"head.scale{s}"])
        ctr = _conv(rt, p, "head.ctr_out", relu=False) if cfg.use_centerness else None
        pss = None
        if cfg.with_pss:
            src = rt if cfg.pss_branch == "regression" else ct
            if cfg.use_stop_grad:
                src = ad.stop_gradient(src)
            for j in range(cfg.pss_depth - 1):
                src = _conv(src, p, f"{PSS_PREFIX}{j}")
            pss = _conv(src, p, f"{PSS_PREFIX}out", relu=False)
        levels.append(LevelOutput(s, cls, reg, ctr, pss))
    return DetectorOutputs(levels, (height, width))


def flatten(maps: list[Tensor]) -> Tensor:
    """Per-level N x K x H x W maps -> one N x L x K tensor (level-major)."""
    parts = []
    for m in maps:
        nb, k, hh, ww = m.shape
        parts.append(ad.reshape(ad.transpose(m, (0, 2, 3, 1)), (nb, hh * ww, k)))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def flat_arrays(outputs: DetectorOutputs) -> dict[str, np.ndarray]:
    """Plain numpy views of the flattened maps (no tape involvement)."""
    def cat(key):
        maps = [getattr(lv, key) for lv in outputs.levels]
        if maps[0] is None:
            return None
        return np.concatenate([m.data.transpose(0, 2, 3, 1).reshape(m.shape[0], -1, m.shape[1])
                               for m in maps], axis=1)
    return {k: cat(k) for k in ("cls", "reg", "ctr", "pss")}


def describe(params: DetectorParams) -> str:
    cfg = params.config
    rows = [("name", "shape", "count")]
    for name, arr in params.arrays.items():
        rows.append((name, "x".join(str(d) for d in arr.shape), str(arr.size)))
    wn = max(len(r[0]) for r in rows)
    ws = max(len(r[1]) for r in rows)
    lines = [f"{a:<{wn}}  {b:<{ws}}  {c:>8}" for a, b, c in rows]
    total = params.count()
    pss = sum(params.arrays[n].size for n in params.names(pss=True))
    lines.append(f"total parameters: {total}")
    lines.append(f"pss head parameters: {pss}")
    lines.append(f"classes: {cfg.num_classes}  strides: {list(cfg.strides)}  "
                 f"pss_branch: {cfg.pss_branch}  stop_grad: {cfg.use_stop_grad}")
    return "\n".join(lines)
