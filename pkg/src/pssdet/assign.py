"""Label assignment.

One-to-many (FCOS centre sampling, ATSS) produces the dense targets of the
base detector. One-to-one picks a single anchor per instance by maximising a
quality score over the one-to-many positives, via Hungarian matching or a
greedy top-one pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import centerness_array, iou_matrix

BACKGROUND = -1
DEFAULT_RANGES = ((0.0, 16.0), (16.0, 32.0), (32.0, math.inf))


class InfeasibleError(ValueError):
    pass


@dataclass
class OneToManyLabels:
    classes: np.ndarray      # (L,) class id, BACKGROUND for negatives
    ltrb: np.ndarray         # (L, 4) regression target in stride units
    centerness: np.ndarray   # (L,)
    owner: np.ndarray        # (L,) instance index, -1 for negatives
    unmatched: list[int] = field(default_factory=list)

    @property
    def positive(self) -> np.ndarray:
        return self.owner >= 0

    def candidates(self, num_instances: int) -> list[np.ndarray]:
        """Omega_j: the positive anchor indices owned by each instance."""
        return [np.flatnonzero(self.owner == j) for j in range(num_instances)]


@dataclass
class OneToOneAssignment:
    anchors: np.ndarray      # (M,) anchor index per instance, -1 if unassigned
    quality: np.ndarray      # (M,) achieved Q

    @property
    def total(self) -> float:
        return float(sum(float(q) for a, q in zip(self.anchors, self.quality) if a >= 0))

    def pairs(self):
        return [(j, int(a)) for j, a in enumerate(self.anchors) if a >= 0]


def _ltrb(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(L, M, 4) pixel distances from each point to each box side."""
    x = points[:, None, 0]
    y = points[:, None, 1]
    return np.stack([x - boxes[None, :, 0], y - boxes[None, :, 1],
                     boxes[None, :, 2] - x, boxes[None, :, 3] - y], axis=-1)


def _labels_from_owner(owner, dist, strides, classes, num_instances) -> OneToManyLabels:
    n = len(owner)
    pos = owner >= 0
    ltrb = np.zeros((n, 4))
    idx = np.flatnonzero(pos)
    ltrb[idx] = dist[idx, owner[idx]] / strides[idx, None]
    cls = np.full(n, BACKGROUND, dtype=np.int64)
    cls[idx] = np.asarray(classes, dtype=np.int64)[owner[idx]]
    ctr = np.zeros(n)
    ctr[idx] = centerness_array(ltrb[idx])
    unmatched = [j for j in range(num_instances) if not np.any(owner == j)]
    return OneToManyLabels(cls, ltrb, ctr, owner, unmatched)


def fcos_assign(points, strides, levels, boxes, classes, ranges=DEFAULT_RANGES,
                radius: float = 1.5) -> OneToManyLabels:
    """Centre-sampling rule with per-level ranges on max(l, t, r, b).

    An anchor claimed by several boxes goes to the smallest one.
    """
    points = np.asarray(points, dtype=np.float64)
    strides = np.asarray(strides, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n, m = len(points), len(boxes)
    if m == 0:
        return _labels_from_owner(np.full(n, -1), np.zeros((n, 0, 4)), strides, classes, 0)
    dist = _ltrb(points, boxes)
    inside = dist.min(axis=-1) > 0
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    reach = radius * strides[:, None]
    central = (np.abs(points[:, None, 0] - cx[None]) < reach) & (np.abs(points[:, None, 1] - cy[None]) < reach)
    lo = np.array([r[0] for r in ranges])[levels][:, None]
    hi = np.array([r[1] for r in ranges])[levels][:, None]
    maxd = dist.max(axis=-1)
    ok = inside & central & (maxd > lo) & (maxd <= hi)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    masked = np.where(ok, area[None, :], np.inf)
    owner = np.where(ok.any(axis=1), masked.argmin(axis=1), -1)
    return _labels_from_owner(owner, dist, strides, classes, m)


def atss_assign(points, strides, levels, boxes, classes, top_k: int = 9,
                anchor_scale: float = 6.0) -> OneToManyLabels:
    """Adaptive training sample selection with one square anchor per point.

    Per level the ``top_k`` anchors closest to the box centre are candidates;
    the IoU threshold is mean + std (sample std) of the candidates' IoUs.
    Positives also need their centre strictly inside the box. An anchor
    claimed by several boxes goes to the one it overlaps most.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    points = np.asarray(points, dtype=np.float64)
    strides = np.asarray(strides, dtype=np.float64)
    levels = np.asarray(levels)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n, m = len(points), len(boxes)
    if m == 0:
        return _labels_from_owner(np.full(n, -1), np.zeros((n, 0, 4)), strides, classes, 0)
    half = anchor_scale * strides / 2.0
    anchors = np.stack([points[:, 0] - half, points[:, 1] - half,
                        points[:, 0] + half, points[:, 1] + half], axis=1)
    ious = iou_matrix(anchors, boxes)
    dist = _ltrb(points, boxes)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    d2 = (points[:, None, 0] - cx[None]) ** 2 + (points[:, None, 1] - cy[None]) ** 2
    is_cand = np.zeros((n, m), dtype=bool)
    for lvl in np.unique(levels):
        idx = np.flatnonzero(levels == lvl)
        k = min(top_k, len(idx))
        order = np.argsort(d2[idx], axis=0, kind="stable")[:k]
        for j in range(m):
            is_cand[idx[order[:, j]], j] = True
    ok = np.zeros((n, m), dtype=bool)
    for j in range(m):
        c = np.flatnonzero(is_cand[:, j])
        vals = ious[c, j]
        thr = vals.mean() + (vals.std(ddof=1) if len(vals) > 1 else 0.0)
        ok[c, j] = vals >= thr
    ok &= dist.min(axis=-1) > 0
    masked = np.where(ok, ious, -np.inf)
    owner = np.where(ok.any(axis=1), masked.argmax(axis=1), -1)
    return _labels_from_owner(owner, dist, strides, classes, m)


def candidate_mask(candidates: list[np.ndarray], num_anchors: int) -> np.ndarray:
    mask = np.zeros((num_anchors, len(candidates)), dtype=bool)
    for j, idx in enumerate(candidates):
        mask[idx, j] = True
    return mask


def quality_matrix(scores, pred_boxes, gt_boxes, gt_classes, candidates,
                   alpha: float = 0.8, mode: str = "mul") -> np.ndarray:
    """Q[i, j] for anchors i and instances j.

    ``scores`` is the (L, C) selection probability sigma(pss)*sigma(s)*sigma(ctr);
    ``candidates`` is either a list of Omega_j index arrays or an (L, M) mask.
    mul: 1[i in Omega_j] * P^(1-alpha) * IoU^alpha
    add: 1[i in Omega_j] * ((1-alpha)*P + alpha*IoU)
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    mask = candidates if isinstance(candidates, np.ndarray) and candidates.dtype == bool \
        else candidate_mask(candidates, n)
    prob = scores[:, np.asarray(gt_classes, dtype=np.int64)]
    overlap = iou_matrix(pred_boxes, gt_boxes)
    if mode == "mul":
        q = prob ** (1.0 - alpha) * overlap ** alpha
    elif mode == "add":
        q = (1.0 - alpha) * prob + alpha * overlap
    else:
        raise ValueError(f"mode must be 'mul' or 'add', got {mode!r}")
    return np.where(mask, q, 0.0)


def _min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method for rows <= cols.

    Returns the column assigned to each row. Column scans keep the first
    minimum, so equal-cost alternatives resolve toward lower column indices.
    """
    n, m = cost.shape
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # match[col] = row (1-based), 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[match[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if match[j]:
            cols[match[j] - 1] = j - 1
    return cols


def _check_shape(q):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"Q must be a 2-d anchors x instances matrix, got shape {q.shape}")
    n_anchor, n_inst = q.shape
    if n_inst > n_anchor:
        raise InfeasibleError(f"{n_inst} instances cannot be matched to only {n_anchor} anchors")
    return q


def hungarian_match(q, allowed: np.ndarray | None = None) -> OneToOneAssignment:
    """Injective instance -> anchor map maximising sum_j Q[anchor_j, j].

    ``allowed`` (same shape as Q) forbids pairs; an instance left with only
    forbidden anchors comes back unassigned (-1).
    """
    q = _check_shape(q)
    n_anchor, n_inst = q.shape
    if n_inst == 0:
        return OneToOneAssignment(np.zeros(0, dtype=np.int64), np.zeros(0))
    cost = -q.T.copy()
    if allowed is not None:
        big = 2.0 * (n_inst + 1) * (np.abs(q).max() + 1.0)
        cost[~np.asarray(allowed, dtype=bool).T] = big
    cols = _min_cost_assignment(cost)
    anchors = cols.copy()
    if allowed is not None:
        ok = np.asarray(allowed, dtype=bool)[cols, np.arange(n_inst)]
        anchors[~ok] = -1
    quality = np.where(anchors >= 0, q[cols, np.arange(n_inst)], 0.0)
    return OneToOneAssignment(anchors, quality)


def top_one_match(q, allowed: np.ndarray | None = None) -> OneToOneAssignment:
    """Greedy: instances in descending order of their best Q each take their
    best still-unclaimed anchor."""
    q = _check_shape(q)
    n_anchor, n_inst = q.shape
    work = q.copy()
    if allowed is not None:
        work[~np.asarray(allowed, dtype=bool)] = -np.inf
    order = np.argsort(-work.max(axis=0, initial=-np.inf), kind="stable") if n_inst else []
    taken = np.zeros(n_anchor, dtype=bool)
    anchors = np.full(n_inst, -1, dtype=np.int64)
    quality = np.zeros(n_inst)
    for j in order:
        col = np.where(taken, -np.inf, work[:, j])
        i = int(np.argmax(col))
        if not np.isfinite(col[i]):
            continue
        anchors[j] = i
        quality[j] = q[i, j]
        taken[i] = True
    return OneToOneAssignment(anchors, quality)


def one_to_one(q: np.ndarray, candidates: list[np.ndarray], method: str = "hungarian") -> OneToOneAssignment:
    """Match over the union of candidate anchors only; other rows are all-zero
    and forbidden. Instances with empty Omega_j stay unassigned."""
    n_anchor, n_inst = q.shape
    rows = np.unique(np.concatenate([c for c in candidates] + [np.zeros(0, dtype=np.int64)])).astype(np.int64)
    anchors = np.full(n_inst, -1, dtype=np.int64)
    quality = np.zeros(n_inst)
    live = [j for j in range(n_inst) if len(candidates[j])]
    if not live or len(rows) < len(live):
        return OneToOneAssignment(anchors, quality)
    sub_q = q[np.ix_(rows, live)]
    allowed = candidate_mask(candidates, n_anchor)[np.ix_(rows, live)]
    matcher = {"hungarian": hungarian_match, "top_one": top_one_match}[method]
    res = matcher(sub_q, allowed)
    for k, j in enumerate(live):
        if res.anchors[k] >= 0:
            anchors[j] = rows[res.anchors[k]]
            quality[j] = res.quality[k]
    return OneToOneAssignment(anchors, quality)


def write_trace(fp, image_id, assignment: OneToOneAssignment, levels: np.ndarray) -> None:
    """Append one JSON line per matched instance."""
    for j, a in assignment.pairs():
        fp.write(json.dumps({"image_id": image_id, "instance_id": j, "anchor": a,
                             "level": int(levels[a]), "q": float(assignment.quality[j])}) + "\n")
