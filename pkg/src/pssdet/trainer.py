"""Training loop: forward, dynamic one-to-one labels, loss, backward, SGD."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .assign import OneToManyLabels, atss_assign, fcos_assign, one_to_one, quality_matrix
from .autodiff import SgdState, Tape
from .data import Scene, hflip
from .geometry import decode_array
from .inference import evaluate_model
from .losses import (LossBreakdown, centerness_loss, focal_loss, giou_loss, one_to_one_targets,
                     ranking_loss, selection_probability)
from .model import DetectorParams, anchor_points, flatten, forward

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_cls", "l_reg", "l_ctr", "l_pss", "l_rank", "total", "epoch", "lr", "phase")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    epochs: int = 24
    batch_size: int = 8
    lr: float = 0.02               # doubled from the reference schedule for the tiny backbone
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (16, 22)
    lr_decay_factor: float = 0.1
    warmup_iters: int = 100
    warmup_factor: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.25
    alpha: float = 0.8
    match: str = "hungarian"      # or "top_one"
    quality_mode: str = "mul"     # or "add"
    assigner: str = "fcos"        # or "atss"
    center_radius: float = 1.5
    fcos_ranges: tuple[tuple[float, float], ...] = ((0.0, 16.0), (16.0, 32.0), (32.0, math.inf))
    atss_top_k: int = 9
    atss_anchor_scale: float = 6.0
    detach_partners: bool = True
    pss_lr_scale: float = 1.0     # learning-rate multiplier for the PSS head
    mode: str = "end_to_end"      # or "two_step"
    two_step_epochs: tuple[int, int] = (16, 8)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    rank_margin: float = 0.5
    rank_num_neg: int = 3
    hflip: bool = True
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.two_step_epochs = tuple(int(e) for e in self.two_step_epochs)
        self.fcos_ranges = tuple((float(a), float(b)) for a, b in self.fcos_ranges)
        if self.pss_lr_scale <= 0:
            raise ValueError(f"pss_lr_scale must be positive, got {self.pss_lr_scale}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if any(not 0 < e <= self.epochs for e in self.lr_decay_epochs):
            raise ValueError(f"lr_decay_epochs {self.lr_decay_epochs} must lie within 1..{self.epochs}")
        for key, allowed in (("match", ("hungarian", "top_one")), ("quality_mode", ("mul", "add")),
                             ("assigner", ("fcos", "atss")), ("mode", ("end_to_end", "two_step"))):
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fcos_ranges"] = [[a, b if math.isfinite(b) else "inf"] for a, b in self.fcos_ranges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "fcos_ranges" in d:
            d["fcos_ranges"] = tuple((float(a), float(b)) for a, b in d["fcos_ranges"])
        return cls(**d)


@dataclass
class Phase:
    name: str                 # "end_to_end", "fcos" or "pss"
    epochs: int
    decay_epochs: tuple[int, ...]
    lambda1: float
    lambda2: float
    trainable: str            # "all", "fcos" or "pss"


@dataclass
class TrainResult:
    params: DetectorParams
    log: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)


def phases(cfg: TrainConfig) -> list[Phase]:
    if cfg.mode == "end_to_end":
        return [Phase("end_to_end", cfg.epochs, cfg.lr_decay_epochs, cfg.lambda1, cfg.lambda2, "all")]
    first, second = cfg.two_step_epochs

    def scaled(n):
        return tuple(sorted({min(max(int(round(e * n / cfg.epochs)), 1), n) for e in cfg.lr_decay_epochs}))

    return [Phase("fcos", first, scaled(first), 0.0, 0.0, "fcos"),
            Phase("pss", second, scaled(second), cfg.lambda1, cfg.lambda2, "pss")]


def one_to_many_labels(scene_boxes, scene_classes, points, strides, levels, cfg: TrainConfig) -> OneToManyLabels:
    if cfg.assigner == "atss":
        return atss_assign(points, strides, levels, scene_boxes, scene_classes,
                           top_k=cfg.atss_top_k, anchor_scale=cfg.atss_anchor_scale)
    return fcos_assign(points, strides, levels, scene_boxes, scene_classes,
                       ranges=cfg.fcos_ranges, radius=cfg.center_radius)


class LabelCache:
    """One-to-many labels depend only on the ground truth, so compute once
    per (image, flipped)."""

    def __init__(self, params_cfg, cfg: TrainConfig, height: int, width: int):
        self.points, self.strides, self.levels = anchor_points(params_cfg.strides, height, width)
        self.cfg = cfg
        self._cache: dict = {}

    def get(self, key, boxes, classes) -> OneToManyLabels:
        if key not in self._cache:
            self._cache[key] = one_to_many_labels(boxes, classes, self.points, self.strides,
                                                  self.levels, self.cfg)
        return self._cache[key]


def _batch(scenes: list[Scene], flips: list[bool]):
    images, boxes = [], []
    for s, f in zip(scenes, flips):
        if f:
            img, b = hflip(s.image, s.boxes)
        else:
            img, b = s.image, s.boxes
        images.append(img)
        boxes.append(b)
    return np.stack(images), boxes


def _guarded(name, fn, *args):
    try:
        return fn(*args)
    except TrainingDiverged:
        raise
    except FloatingPointError as e:
        raise TrainingDiverged(f"non-finite loss term(s): {name} ({e})", {"term": name, "error": str(e)}) from e


def compute_losses(params: DetectorParams, images, boxes, classes, labels: list[OneToManyLabels],
                   cfg: TrainConfig, lambda1: float, lambda2: float, tape: Tape | None,
                   trainable: set[str] | None, anchors=None, watched: dict | None = None):
    """Forward pass plus every loss term; returns (total tensor, breakdown,
    one-to-one assignments)."""
    mcfg = params.config
    outputs = forward(params, images, tape, trainable, watched)
    cls = flatten([lv.cls for lv in outputs.levels])
    reg = flatten([lv.reg for lv in outputs.levels])
    ctr = flatten([lv.ctr for lv in outputs.levels]) if mcfg.use_centerness else None
    n, num_anchors, num_classes = cls.shape

    cls_targets = np.zeros((n, num_anchors, num_classes))
    pos_n, pos_l = [], []
    for k, lab in enumerate(labels):
        idx = np.flatnonzero(lab.positive)
        cls_targets[k, idx, lab.classes[idx]] = 1.0
        pos_n.append(np.full(len(idx), k))
        pos_l.append(idx)
    pos_n = np.concatenate(pos_n)
    pos_l = np.concatenate(pos_l)
    num_pos = len(pos_l)
    ltrb_t = np.concatenate([lab.ltrb[lab.positive] for lab in labels]).reshape(-1, 4)
    ctr_t = np.concatenate([lab.centerness[lab.positive] for lab in labels])

    l_cls = _guarded("l_cls", focal_loss, ad.sigmoid(cls), cls_targets, cfg.focal_gamma, cfg.focal_alpha, num_pos)
    if num_pos:
        l_reg = _guarded("l_reg", giou_loss, reg[pos_n, pos_l], ltrb_t, ctr_t)
        l_ctr = _guarded("l_ctr", centerness_loss, ctr[pos_n, pos_l, 0], ctr_t) if ctr is not None \
            else ad.Tensor(0.0)
    else:
        l_reg = l_ctr = ad.Tensor(0.0)
    total = l_cls + l_reg + l_ctr
    terms = {"l_cls": l_cls, "l_reg": l_reg, "l_ctr": l_ctr}

    assignments = None
    if (lambda1 > 0 or lambda2 > 0) and mcfg.with_pss:
        pss = flatten([lv.pss for lv in outputs.levels])
        prob = selection_probability(pss, cls, ctr, cfg.detach_partners)
        points, strides, _ = anchors if anchors is not None else anchor_points(mcfg.strides, *images.shape[2:])
        assignments = []
        for k, lab in enumerate(labels):
            cand = lab.candidates(len(classes[k]))
            pred = decode_array(points, reg.data[k], strides)
            q = quality_matrix(prob.data[k], pred, boxes[k], classes[k], cand, cfg.alpha, cfg.quality_mode)
            assignments.append(one_to_one(q, cand, cfg.match))
        num_inst = sum(len(a.pairs()) for a in assignments)
        if lambda1 > 0:
            targets = one_to_one_targets(prob.shape, assignments, classes)
            l_pss = _guarded("l_pss", focal_loss, prob, targets, cfg.focal_gamma, cfg.focal_alpha, num_inst)
            terms["l_pss"] = l_pss
            total = total + l_pss * lambda1
        if lambda2 > 0:
            l_rank = ranking_loss(prob, assignments, classes, cfg.rank_margin, cfg.rank_num_neg, num_inst)
            terms["l_rank"] = l_rank
            total = total + l_rank * lambda2

    values = {k: float(v.data) for k, v in terms.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad or not math.isfinite(float(total.data)):
        raise TrainingDiverged(f"non-finite loss term(s): {', '.join(bad) or 'total'}", values)
    breakdown = LossBreakdown(lambda1=lambda1, lambda2=lambda2, total=float(total.data), **values)
    return total, breakdown, assignments


def _trainable_names(params: DetectorParams, which: str) -> list[str]:
    if which == "all":
        return params.names()
    return params.names(pss=(which == "pss"))


def train_step(params: DetectorParams, scenes, cfg: TrainConfig, state: SgdState,
               phase: Phase | None = None, flips=None, label_cache: LabelCache | None = None):
    """One SGD update on a batch of scenes. Returns (new params, LossBreakdown)."""
    phase = phase or phases(cfg)[0]
    flips = flips if flips is not None else [False] * len(scenes)
    images, boxes = _batch(scenes, flips)
    if label_cache is None:
        label_cache = LabelCache(params.config, cfg, images.shape[2], images.shape[3])
    labels = [label_cache.get((s.image_id, f), b, s.classes) for s, f, b in zip(scenes, flips, boxes)]
    classes = [s.classes for s in scenes]
    names = _trainable_names(params, phase.trainable)
    tape = Tape()
    leaves: dict = {}
    total, breakdown, _ = compute_losses(
        params, images, boxes, classes, labels, cfg, phase.lambda1, phase.lambda2, tape, set(names),
        anchors=(label_cache.points, label_cache.strides, label_cache.levels), watched=leaves)
    grads = ad.backward(total, tape)
    scale = {n: cfg.pss_lr_scale for n in params.names(pss=True)} if cfg.pss_lr_scale != 1.0 else None
    new_arrays = ad.sgd_step(params.arrays, {n: grads[leaves[n]] for n in names}, state, names, scale)
    return DetectorParams(params.config, new_arrays), breakdown


def lr_at(phase: Phase, base_lr: float, epoch: int, it: int, cfg: TrainConfig) -> float:
    lr = base_lr * cfg.lr_decay_factor ** sum(epoch >= e for e in phase.decay_epochs)
    if it < cfg.warmup_iters:
        frac = it / cfg.warmup_iters
        lr *= cfg.warmup_factor * (1 - frac) + frac
    return lr


def train(dataset: list[Scene], cfg: TrainConfig, params: DetectorParams, out_dir=None,
          eval_scenes: list[Scene] | None = None, progress=None, start_phase: int = 0,
          stop_phase: int | None = None) -> TrainResult:
    """Run phases ``start_phase`` up to (not including) ``stop_phase``; optional CSV
    log / snapshots / checkpoint in ``out_dir``.

    Skipped phases still advance the epoch counter, so a run resumed from a
    saved phase-1 result draws the same batches as an uninterrupted one.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    height, width = dataset[0].image.shape[1:]
    cache = LabelCache(params.config, cfg, height, width)
    result = TrainResult(params)
    step = 0
    log_fp = writer = None
    if out is not None:
        log_fp = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(log_fp, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    try:
        epoch_offset = 0
        for k, phase in enumerate(phases(cfg)):
            if stop_phase is not None and k >= stop_phase:
                break
            if k < start_phase:
                epoch_offset += phase.epochs
                step += phase.epochs * math.ceil(len(dataset) / cfg.batch_size)
                continue
            state = SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
            it = 0
            for epoch in range(phase.epochs):
                rng = np.random.default_rng([cfg.seed, epoch_offset + epoch])
                order = rng.permutation(len(dataset))
                flip_draw = rng.random(len(dataset)) < 0.5
                for start in range(0, len(order), cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    batch = [dataset[i] for i in idx]
                    flips = [bool(flip_draw[i]) and cfg.hflip for i in idx]
                    state.learning_rate = lr_at(phase, cfg.lr, epoch, it, cfg)
                    try:
                        params, bd = train_step(params, batch, cfg, state, phase, flips, cache)
                    except TrainingDiverged as e:
                        e.diagnostics.update(step=step, epoch=epoch_offset + epoch, phase=phase.name,
                                             images=[int(s.image_id) for s in batch])
                        if out is not None:
                            (out / "divergence.json").write_text(json.dumps(e.diagnostics, indent=1))
                        raise
                    row = {k: v for k, v in bd.as_row().items() if k in LOG_COLUMNS}
                    row.update(step=step, epoch=epoch_offset + epoch, lr=state.learning_rate, phase=phase.name)
                    result.log.append(row)
                    if writer is not None:
                        writer.writerow(row)
                    step += 1
                    it += 1
                if progress is not None:
                    progress(phase.name, epoch_offset + epoch, result.log[-1])
                done = epoch_offset + epoch + 1
                if eval_scenes and cfg.eval_every and done % cfg.eval_every == 0:
                    result.snapshots.append(_snapshot(params, eval_scenes, done, phase.name))
            epoch_offset += phase.epochs
    finally:
        if log_fp is not None:
            log_fp.close()
    result.params = params
    if out is not None:
        checkpoint.save(out / "model.pssd", params)
        if result.snapshots:
            with open(out / "snapshots.jsonl", "w") as f:
                for s in result.snapshots:
                    f.write(json.dumps(s) + "\n")
    return result


def _snapshot(params, scenes, epoch, phase) -> dict:
    rec = {"epoch": epoch, "phase": phase}
    if params.config.with_pss and phase != "fcos":
        r, _ = evaluate_model(params, scenes, "end_to_end")
        rec.update(e2e_map=r.mean_ap, e2e_ap50=r.ap50, e2e_dup=r.duplicate_rate)
    r, _ = evaluate_model(params, scenes, "one_to_many", 0.6)
    rec.update(nms_map=r.mean_ap, nms_ap50=r.ap50)
    return rec


def train_end_to_end(dataset, cfg: TrainConfig, params: DetectorParams, out_dir=None,
                     eval_scenes=None, progress=None) -> TrainResult:
    if cfg.mode != "end_to_end":
        raise ValueError("train_end_to_end needs mode='end_to_end'")
    return train(dataset, cfg, params, out_dir, eval_scenes, progress)


def train_two_step(dataset, cfg: TrainConfig, params: DetectorParams, out_dir=None,
                   eval_scenes=None, progress=None, start_phase: int = 0) -> TrainResult:
    """Phase 1 fits the FCOS part with the PSS terms off; phase 2 freezes it
    and fits only the PSS head."""
    if cfg.mode != "two_step":
        raise ValueError("train_two_step needs mode='two_step'")
    return train(dataset, cfg, params, out_dir, eval_scenes, progress, start_phase)
