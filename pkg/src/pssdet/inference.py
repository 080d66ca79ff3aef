"""Inference paths, NMS, COCO-style evaluation and score heatmaps."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import _sigmoid
from .geometry import decode_array, iou_matrix
from .model import DetectorOutputs, DetectorParams, anchor_points, flat_arrays, forward

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SCORE_FLOOR = 0.01


class Detection(NamedTuple):
    class_id: int
    box: tuple[float, float, float, float]
    score: float
    source: str = "end_to_end"   # or "one_to_many"

    def to_json(self, image_id) -> str:
        return json.dumps({"image_id": image_id, "class": self.class_id,
                           "bbox": [float(v) for v in self.box], "score": float(self.score),
                           "source": self.source})


@dataclass
class EvalReport:
    ap_per_threshold: list[float]
    mean_ap: float
    ap50: float
    ap75: float
    mean_ar100: float
    duplicate_rate: float
    per_class_ap: dict[int, float]
    forward_ms: float = 0.0
    postprocess_ms: float = 0.0
    num_images: int = 0
    source: str = ""
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        """Everything except wall-clock timings."""
        d = asdict(self)
        d.pop("forward_ms")
        d.pop("postprocess_ms")
        return d

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return json.dumps(d, indent=1)


def _scores(flat: dict, n: int, kind: str) -> np.ndarray:
    """(L, C) score map for image ``n`` of a batch."""
    cls = _sigmoid(flat["cls"][n])
    ctr = _sigmoid(flat["ctr"][n]) if flat["ctr"] is not None else None
    if kind == "cls":
        return cls
    if kind == "pss":
        return np.broadcast_to(_sigmoid(flat["pss"][n]), cls.shape)
    if kind == "product":
        s = cls * _sigmoid(flat["pss"][n])
        return s * ctr if ctr is not None else s
    if kind == "one_to_many":
        return np.sqrt(cls * ctr) if ctr is not None else cls
    raise ValueError(f"unknown score kind {kind!r}")


def _decode(outputs: DetectorOutputs, kind: str, top_k: int, floor: float, source: str):
    h, w = outputs.image_size
    flat = flat_arrays(outputs)
    strides = [lv.stride for lv in outputs.levels]
    points, anchor_strides, _ = anchor_points(strides, h, w)
    results = []
    for n in range(flat["cls"].shape[0]):
        scores = _scores(flat, n, kind)
        num_classes = scores.shape[1]
        flat_scores = scores.ravel()
        keep = np.flatnonzero(flat_scores > floor)
        if len(keep) > top_k:
            # stable ordering: score descending, then index ascending
            order = np.lexsort((keep, -flat_scores[keep]))[:top_k]
            keep = keep[order]
        else:
            keep = keep[np.lexsort((keep, -flat_scores[keep]))]
        loc, cls = keep // num_classes, keep % num_classes
        boxes = decode_array(points[loc], flat["reg"][n][loc], anchor_strides[loc])
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
        results.append([Detection(int(c), tuple(float(v) for v in b), float(flat_scores[k]), source)
                        for c, b, k in zip(cls, boxes, keep)])
    return results


def decode_end_to_end(outputs: DetectorOutputs, top_k: int = 100, floor: float = SCORE_FLOOR):
    """Global top-k of sigmoid(pss)*sigmoid(s)*sigmoid(ctr); no suppression.

    Returns one detection list per image in the batch.
    """
    if outputs.levels[0].pss is None:
        raise ValueError("end-to-end decoding needs a network with the PSS head")
    return _decode(outputs, "product", top_k, floor, "end_to_end")


def decode_one_to_many(outputs: DetectorOutputs, top_k: int = 1000, floor: float = SCORE_FLOOR):
    """Scores sqrt(sigmoid(s)*sigmoid(ctr)), the PSS head ignored; meant to be
    followed by :func:`nms`."""
    return _decode(outputs, "one_to_many", top_k, floor, "one_to_many")


def nms(dets: list[Detection], iou_threshold: float = 0.6, max_dets: int | None = None) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a higher-scored one
    by more than ``iou_threshold``. Output is score-descending, stable."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (ious[i] > iou_threshold) & (classes == classes[i])
        if max_dets is not None and len(keep) >= max_dets:
            break
    return [dets[i] for i in keep]


def _per_image(dets, max_dets):
    return sorted(dets, key=lambda d: -d.score)[:max_dets]


def _match_class(dets_by_image, gts_by_image, class_id, thr):
    """Greedy score-ordered matching for one class at one IoU threshold.

    Returns (scores, tp flags, number of ground truths)."""
    entries = []
    for img, dets in dets_by_image.items():
        for k, d in enumerate(dets):
            if d.class_id == class_id:
                entries.append((-d.score, img, k, d))
    entries.sort(key=lambda e: e[0])  # stable: ties keep image/detection order
    gts = {img: g[1][g[0] == class_id] for img, g in gts_by_image.items()}
    npos = sum(len(b) for b in gts.values())
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gts.items()}
    tp = np.zeros(len(entries), dtype=bool)
    for e, (_, img, _, d) in enumerate(entries):
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = iou_matrix(np.array([d.box]), g)[0]
        ious[used[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= thr:
            used[img][best] = True
            tp[e] = True
    return np.array([-e[0] for e in entries]), tp, npos


def average_precision(tp: np.ndarray, npos: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall from score-ordered TP flags."""
    if npos == 0:
        return 0.0, 0.0
    if len(tp) == 0:
        return 0.0, 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return math.fsum(interp) / len(RECALL_POINTS), float(recall[-1])


def _mean(values) -> float:
    return math.fsum(values) / len(values) if len(values) else 0.0


def evaluate(dets_per_image: dict, annotations, max_dets: int = 100,
             num_classes: int | None = None, source: str = "") -> EvalReport:
    """COCO-style AP/AR over IoU 0.50:0.05:0.95 (area ranges omitted).

    ``dets_per_image`` maps image id -> detections; ``annotations`` is a list
    of scenes carrying ``image_id``, ``classes`` and ``boxes``.
    """
    gts = {s.image_id: (np.asarray(s.classes), np.asarray(s.boxes).reshape(-1, 4)) for s in annotations}
    unknown = set(dets_per_image) - set(gts)
    if unknown:
        raise KeyError(f"detections for unknown image ids: {sorted(unknown)[:5]}")
    dets = {img: _per_image(dets_per_image.get(img, []), max_dets) for img in gts}
    if num_classes is None:
        labels = [int(c) for cls, _ in gts.values() for c in cls]
        labels += [d.class_id for v in dets.values() for d in v]
        num_classes = max(labels) + 1 if labels else 0
    present = [c for c in range(num_classes) if any(np.any(g[0] == c) for g in gts.values())]
    ap = np.zeros((len(IOU_THRESHOLDS), len(present)))
    ar = np.zeros_like(ap)
    for ti, thr in enumerate(IOU_THRESHOLDS):
        for ci, c in enumerate(present):
            _, tp, npos = _match_class(dets, gts, c, thr)
            ap[ti, ci], ar[ti, ci] = average_precision(tp, npos)
    # exactly rounded means keep results independent of summation order
    ap_t = [_mean(row) for row in ap]
    ar_t = [_mean(row) for row in ar]
    return EvalReport(
        ap_per_threshold=ap_t,
        mean_ap=_mean(ap_t),
        ap50=ap_t[0],
        ap75=ap_t[5],
        mean_ar100=_mean(ar_t),
        duplicate_rate=duplicate_rate(dets, annotations),
        per_class_ap={c: _mean(ap[:, ci]) for ci, c in enumerate(present)},
        num_images=len(gts),
        source=source,
    )


def duplicate_rate(dets_per_image: dict, annotations, score_thr: float = 0.5, iou_thr: float = 0.5) -> float:
    """Fraction of ground-truth instances hit by two or more same-class
    detections scoring at least ``score_thr``."""
    total = dup = 0
    for s in annotations:
        boxes = np.asarray(s.boxes).reshape(-1, 4)
        total += len(boxes)
        confident = [d for d in dets_per_image.get(s.image_id, []) if d.score >= score_thr]
        if not confident or not len(boxes):
            continue
        db = np.array([d.box for d in confident])
        dc = np.array([d.class_id for d in confident])
        ious = iou_matrix(boxes, db)
        hits = (ious >= iou_thr) & (dc[None, :] == np.asarray(s.classes)[:, None])
        dup += int(np.sum(hits.sum(axis=1) >= 2))
    return dup / total if total else 0.0


def run_inference(params: DetectorParams, scenes, path: str = "end_to_end", nms_iou: float | None = 0.6,
                  top_k: int = 100, batch_size: int = 16):
    """Detections per image id plus (forward ms, post-process ms) per image.

    ``path`` is "end_to_end" (PSS product ranking, nothing suppressed) or
    "one_to_many" (PSS ignored; NMS applied when ``nms_iou`` is not None).
    """
    out = {}
    t_fwd = t_post = 0.0
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        t0 = time.perf_counter()
        outputs = forward(params, images)
        t1 = time.perf_counter()
        if path == "end_to_end":
            per_image = decode_end_to_end(outputs, top_k)
        elif path == "one_to_many":
            per_image = decode_one_to_many(outputs, 1000)
            if nms_iou is not None:
                per_image = [nms(d, nms_iou, max_dets=top_k) for d in per_image]
            else:
                per_image = [d[:top_k] for d in per_image]
        else:
            raise ValueError(f"unknown inference path {path!r}")
        t2 = time.perf_counter()
        t_fwd += t1 - t0
        t_post += t2 - t1
        for s, d in zip(chunk, per_image):
            out[s.image_id] = d
    n = max(len(scenes), 1)
    return out, 1000.0 * t_fwd / n, 1000.0 * t_post / n


def evaluate_model(params: DetectorParams, scenes, path: str = "end_to_end", nms_iou: float | None = 0.6,
                   top_k: int = 100) -> tuple[EvalReport, dict]:
    dets, fwd_ms, post_ms = run_inference(params, scenes, path, nms_iou, top_k)
    source = path if path == "end_to_end" else ("one_to_many+nms" if nms_iou is not None else "one_to_many")
    report = evaluate(dets, scenes, max_dets=top_k, num_classes=params.config.num_classes, source=source)
    report.forward_ms = fwd_ms
    report.postprocess_ms = post_ms
    return report, dets


def heatmap(outputs: DetectorOutputs, level: int, kind: str, image_index: int = 0) -> np.ndarray:
    """H x W max-over-class score map of one pyramid level."""
    if not 0 <= level < len(outputs.levels):
        raise IndexError(f"level {level} does not exist (have {len(outputs.levels)})")
    lv = outputs.levels[level]
    cls = _sigmoid(lv.cls.data[image_index])
    if kind == "cls":
        return cls.max(axis=0)
    if lv.pss is None:
        raise ValueError(f"kind {kind!r} needs the PSS head")
    pss = _sigmoid(lv.pss.data[image_index, 0])
    if kind == "pss":
        return pss
    if kind == "product":
        prod = cls * pss[None]
        if lv.ctr is not None:
            prod = prod * _sigmoid(lv.ctr.data[image_index])
        return prod.max(axis=0)
    raise ValueError(f"kind must be cls, pss or product, got {kind!r}")


def write_pgm(path, values: np.ndarray) -> None:
    """Min-max scale to 0..255 and write binary PGM (P5); a constant map is mid-gray."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi > lo:
        img = np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.full(v.shape, 128, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def export_heatmap(outputs: DetectorOutputs, level: int, kind: str, path, image_index: int = 0) -> np.ndarray:
    values = heatmap(outputs, level, kind, image_index)
    write_pgm(path, values)
    return values
