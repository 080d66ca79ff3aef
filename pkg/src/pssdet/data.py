"""Synthetic coloured-shape scenes, PPM image I/O and the JSON annotation file.

Annotation schema::

    {"images": [{"id": 0, "file": "images/000000.ppm", "width": 64, "height": 64,
                 "objects": [{"class": 1, "bbox": [x1, y1, x2, y2]}, ...]}, ...]}

Boxes are corner form, in pixels, as floats.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import iou_matrix

log = logging.getLogger(__name__)

CLASS_NAMES = ("disk", "square", "triangle")
_BASE_COLORS = np.array([[0.90, 0.20, 0.15], [0.15, 0.80, 0.25], [0.20, 0.35, 0.95]])


class AnnotationError(ValueError):
    pass


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 10.0
    max_size: float = 36.0
    overlap_cap: float = 0.1
    noise: float = 0.06
    max_retries: int = 50

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 16")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
        if self.min_size < 6:
            raise ValueError("min_size below 6 pixels makes objects undetectable at stride 4")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")


@dataclass
class Scene:
    image: np.ndarray | None          # 3 x H x W in [0, 1]
    classes: np.ndarray               # (M,) int
    boxes: np.ndarray                 # (M, 4) float
    image_id: int = 0
    file: str = ""
    width: int = 0
    height: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def num_objects(self) -> int:
        return len(self.classes)


def _shape_mask(kind: int, box, yy, xx) -> np.ndarray:
    x1, y1, x2, y2 = box
    if kind == 0:
        cx, cy, r = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == 1:
        return (xx >= x1) & (xx <= x2) & (yy >= y1) & (yy <= y2)
    # apex at top centre, base along the bottom edge
    cx, h, half = (x1 + x2) / 2, y2 - y1, (x2 - x1) / 2
    frac = (yy - y1) / h
    return (yy >= y1) & (yy <= y2) & (np.abs(xx - cx) <= half * frac)


def _background(rng, cfg: SynthConfig) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.55, size=(3, cfg.height // 8 + 1, cfg.width // 8 + 1))
    img = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)[:, :cfg.height, :cfg.width]
    gray = img.mean(axis=0, keepdims=True)
    img = 0.7 * gray + 0.3 * img
    return img + rng.normal(0.0, cfg.noise, size=img.shape)


def render_scene(seed: int, image_id: int, cfg: SynthConfig) -> Scene | None:
    """One scene from a seed derived from (seed, image_id); None if the
    placement constraints could not be met."""
    rng = np.random.default_rng([seed, image_id])
    for _ in range(cfg.max_retries):
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        boxes, classes = [], []
        for _ in range(count):
            for _ in range(cfg.max_retries):
                kind = int(rng.integers(cfg.num_classes))
                w = rng.uniform(cfg.min_size, cfg.max_size)
                h = w if kind != 2 else w * rng.uniform(0.8, 1.0)
                x1 = rng.uniform(0, cfg.width - w)
                y1 = rng.uniform(0, cfg.height - h)
                box = [x1, y1, x1 + w, y1 + h]
                if boxes and iou_matrix(np.array([box]), np.array(boxes)).max() > cfg.overlap_cap:
                    continue
                if cfg.overlap_cap == 0 and boxes and _intersects(box, boxes):
                    continue
                boxes.append(box)
                classes.append(kind)
                break
        if len(boxes) >= cfg.min_objects:
            break
    else:
        log.warning("image %d: could not place %d objects, skipped", image_id, cfg.min_objects)
        return None

    img = _background(rng, cfg)
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width] + 0.5
    for kind, box in zip(classes, boxes):
        mask = _shape_mask(kind, box, yy, xx)
        color = np.clip(_BASE_COLORS[kind] + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        shade = color[:, None] * (1.0 + rng.normal(0.0, cfg.noise / 2, size=(3, int(mask.sum()))))
        img[:, mask] = shade
    img = quantize(img)
    return Scene(img, np.array(classes, dtype=np.int64), np.array(boxes, dtype=np.float64).reshape(-1, 4),
                 image_id=image_id, width=cfg.width, height=cfg.height)


def _intersects(box, boxes) -> bool:
    b = np.asarray(boxes)
    iw = np.minimum(box[2], b[:, 2]) - np.maximum(box[0], b[:, 0])
    ih = np.minimum(box[3], b[:, 3]) - np.maximum(box[1], b[:, 1])
    return bool(np.any((iw > 0) & (ih > 0)))


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to 8 bits so in-memory scenes equal their PPM round trip."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_scenes(seed: int, count: int, cfg: SynthConfig | None = None) -> list[Scene]:
    cfg = cfg or SynthConfig()
    scenes = []
    for i in range(count):
        s = render_scene(seed, i, cfg)
        if s is not None:
            s.file = f"images/{i:06d}.ppm"
            scenes.append(s)
    return scenes


def generate(seed: int, count: int, out_dir, cfg: SynthConfig | None = None) -> list[Scene]:
    """Write ``count`` scenes as PPM files plus ``annotations.json`` under ``out_dir``."""
    cfg = cfg or SynthConfig()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    scenes = generate_scenes(seed, count, cfg)
    for s in scenes:
        write_ppm(out / s.file, s.image)
    save_annotations(out / "annotations.json", scenes, info={"seed": seed, "count": count, **asdict(cfg)})
    return scenes


def write_ppm(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def save_annotations(path, scenes: list[Scene], info: dict | None = None) -> None:
    doc = {"images": [{"id": s.image_id, "file": s.file, "width": s.width, "height": s.height,
                       "objects": [{"class": int(c), "bbox": [float(v) for v in b]}
                                   for c, b in zip(s.classes, s.boxes)]}
                      for s in scenes]}
    if info is not None:
        doc["info"] = info
    Path(path).write_text(json.dumps(doc, indent=1))


def load_annotations(path) -> list[Scene]:
    """Parse an annotation file into image-less :class:`Scene` records."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: malformed JSON: {e}") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise AnnotationError(f"{path}: top level must be an object with an 'images' list")
    scenes = []
    for k, rec in enumerate(doc["images"]):
        try:
            w, h = int(rec["width"]), int(rec["height"])
            classes, boxes = [], []
            for obj in rec["objects"]:
                b = [float(v) for v in obj["bbox"]]
                if len(b) != 4:
                    raise AnnotationError(f"record {k}: bbox needs 4 numbers, got {len(b)}")
                if not (0 <= b[0] <= b[2] <= w and 0 <= b[1] <= b[3] <= h):
                    raise AnnotationError(f"record {k}: bbox {b} outside the {w}x{h} image or inverted")
                classes.append(int(obj["class"]))
                boxes.append(b)
            scenes.append(Scene(None, np.array(classes, dtype=np.int64),
                                np.array(boxes, dtype=np.float64).reshape(-1, 4),
                                image_id=int(rec["id"]), file=str(rec["file"]), width=w, height=h))
        except AnnotationError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise AnnotationError(f"record {k}: {type(e).__name__}: {e}") from e
    return scenes


def load_dataset(root) -> list[Scene]:
    root = Path(root)
    scenes = load_annotations(root / "annotations.json")
    for s in scenes:
        s.image = read_ppm(root / s.file)
    return scenes


def hflip(image: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    width = image.shape[-1]
    flipped = boxes.copy()
    flipped[:, 0] = width - boxes[:, 2]
    flipped[:, 2] = width - boxes[:, 0]
    return image[..., ::-1].copy(), flipped
