"""Training objective terms, built from differentiable tensor ops."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-12


@dataclass
class LossBreakdown:
    l_cls: float = 0.0
    l_reg: float = 0.0
    l_ctr: float = 0.0
    l_pss: float = 0.0
    l_rank: float = 0.0
    total: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 0.25

    def as_row(self) -> dict:
        return asdict(self)


def _check_finite(t: Tensor, what: str):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{what}: non-finite input")


def focal_loss(p, targets, gamma: float = 2.0, alpha: float = 0.25, normalizer: float = 1.0) -> Tensor:
    """sum of -alpha_t (1 - p_t)^gamma log(p_t) over all entries / normalizer.

    ``p`` are probabilities, ``targets`` a same-shape 0/1 array. The
    normalizer is floored at 1.
    """
    p = ad.as_tensor(p)
    _check_finite(p, "focal_loss")
    t = np.asarray(targets, dtype=np.float64)
    pt = p * (2.0 * t - 1.0) + (1.0 - t)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    modulator = (1.0 - pt) ** gamma if gamma != 0 else 1.0
    per = modulator * ad.log(ad.clip(pt, EPS, 1.0)) * (-alpha_t)
    return ad.reduce_sum(per) * (1.0 / max(float(normalizer), 1.0))


def giou_loss(pred, target, weights) -> Tensor:
    """Weighted mean of 1 - GIoU between boxes given as (l, t, r, b) around
    shared anchor points. Both maps must be positive (anchors inside boxes)."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if pred.shape[0] == 0 or w.sum() <= 0:
        return Tensor(0.0)
    _check_finite(pred, "giou_loss")
    pl, pt_, pr, pb = (pred[:, k] for k in range(4))
    tl, tt, tr, tb = (target[:, k] for k in range(4))
    pred_area = (pl + pr) * (pt_ + pb)
    target_area = (tl + tr) * (tt + tb)
    inter_w = ad.minimum(pl, tl) + ad.minimum(pr, tr)
    inter_h = ad.minimum(pt_, tt) + ad.minimum(pb, tb)
    inter = inter_w * inter_h
    union = pred_area + target_area - inter
    enc_w = ad.maximum(pl, tl) + ad.maximum(pr, tr)
    enc_h = ad.maximum(pt_, tt) + ad.maximum(pb, tb)
    enclosing = enc_w * enc_h
    g = inter / union - (enclosing - union) / enclosing
    return ad.reduce_sum((1.0 - g) * w) * (1.0 / w.sum())


def centerness_loss(ctr_logits, targets) -> Tensor:
    """Mean binary cross-entropy between sigmoid(ctr_logits) and soft targets."""
    x = ad.as_tensor(ctr_logits)
    t = np.asarray(targets, dtype=np.float64)
    if x.data.size == 0:
        return Tensor(0.0)
    _check_finite(x, "centerness_loss")
    bce = -(ad.log_sigmoid(x) * t + ad.log_sigmoid(-x) * (1.0 - t))
    return ad.mean(bce)


def selection_probability(pss_logits, cls_logits, ctr_logits=None, detach_partners: bool = True) -> Tensor:
    """sigmoid(pss) * sigmoid(s) * sigmoid(ctr), broadcast over classes.

    With ``detach_partners`` the classification and centre-ness factors are
    constants of this expression.
    """
    cls = ad.as_tensor(cls_logits)
    ctr = ad.as_tensor(ctr_logits) if ctr_logits is not None else None
    if detach_partners:
        cls = ad.stop_gradient(cls)
        ctr = ad.stop_gradient(ctr) if ctr is not None else None
    log_p = ad.log_sigmoid(pss_logits) + ad.log_sigmoid(cls)
    if ctr is not None:
        log_p = log_p + ad.log_sigmoid(ctr)
    return ad.exp(log_p)


def one_to_one_targets(shape, assignments, instance_classes) -> np.ndarray:
    """(N, L, C) one-hot map with a single positive per assigned instance."""
    targets = np.zeros(shape)
    for n, (assign, classes) in enumerate(zip(assignments, instance_classes)):
        anchors = [int(a) for a in assign.anchors if a >= 0]
        if len(set(anchors)) != len(anchors):
            raise ValueError(f"image {n}: two instances share an anchor in the one-to-one assignment")
        for j, a in assign.pairs():
            targets[n, a, int(classes[j])] = 1.0
    return targets


def pss_loss(pss_logits, cls_logits, ctr_logits, assignments, instance_classes,
             detach_partners: bool = True, normalizer: float = 1.0,
             gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Focal loss of the selection probability against one-to-one labels.

    Logit maps are (N, L, 1) for pss/ctr and (N, L, C) for cls. Every
    location-class pair that is not an instance's selected anchor is a
    negative, including unselected one-to-many positives.
    """
    p = selection_probability(pss_logits, cls_logits, ctr_logits, detach_partners)
    targets = one_to_one_targets(p.shape, assignments, instance_classes)
    return focal_loss(p, targets, gamma, alpha, normalizer)


def ranking_loss(scores, assignments, instance_classes, margin: float = 0.5,
                 num_neg: int = 3, normalizer: float = 1.0) -> Tensor:
    """Hinge ranking of each selected anchor against the strongest negatives.

    For instance j at anchor i* with class c: mean over the ``num_neg``
    highest-scoring unselected locations k of max(0, margin - s[i*, c] + s[k, c]).
    Summed over instances, divided by ``normalizer``.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    scores = ad.as_tensor(scores)
    pos_idx, neg_idx = [], []
    for n, (assign, classes) in enumerate(zip(assignments, instance_classes)):
        pairs = assign.pairs()
        if not pairs:
            continue
        selected = np.array([a for _, a in pairs])
        for j, a in pairs:
            c = int(classes[j])
            col = scores.data[n, :, c].copy()
            col[selected] = -np.inf
            k = min(num_neg, int(np.isfinite(col).sum()))
            if k == 0:
                continue
            negs = np.argsort(-col, kind="stable")[:k]
            pos_idx.append((n, a, c))
            neg_idx.append([(n, int(i), c) for i in negs])
    if not pos_idx:
        return Tensor(0.0)
    total = None
    for pos, negs in zip(pos_idx, neg_idx):
        pos_score = scores[pos]
        neg_scores = scores[tuple(np.array(negs).T)]
        term = ad.mean(ad.relu(margin - pos_score + neg_scores))
        total = term if total is None else total + term
    return total * (1.0 / max(float(normalizer), 1.0))
