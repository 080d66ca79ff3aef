import math
import zlib

import numpy as np
import pytest

from gradcheck import check
from pssdet.assign import OneToOneAssignment
from pssdet.autodiff import Tape, backward
from pssdet.losses import (LossBreakdown, centerness_loss, focal_loss, giou_loss, one_to_one_targets, pss_loss,
                           ranking_loss, selection_probability)


def rng_for(name):
    return np.random.default_rng(zlib.crc32(name.encode()))


def assignment(*anchors):
    return OneToOneAssignment(np.array(anchors, dtype=np.int64), np.ones(len(anchors)))


def test_focal_examples():
    assert focal_loss(np.array([0.5]), np.array([1.0])).item() == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-15)
    assert round(0.25 * 0.25 * math.log(2), 6) == 0.043322
    assert focal_loss(np.array([1.0 - 1e-9]), np.array([1.0])).item() < 1e-15
    assert focal_loss(np.array([1e-9]), np.array([0.0])).item() < 1e-15


def test_focal_reduces_to_half_bce():
    rng = rng_for("bce")
    p = rng.uniform(0.01, 0.99, size=(5, 3))
    t = (rng.random((5, 3)) < 0.4).astype(float)
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum()
    assert focal_loss(p, t, gamma=0.0, alpha=0.5).item() == pytest.approx(0.5 * bce, rel=1e-13)


def test_focal_normalizer_floor():
    p, t = np.array([0.3, 0.6]), np.array([1.0, 0.0])
    raw = focal_loss(p, t, normalizer=1.0).item()
    assert focal_loss(p, t, normalizer=0.0).item() == raw
    assert focal_loss(p, t, normalizer=4.0).item() == pytest.approx(raw / 4)


def test_focal_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        focal_loss(np.array([np.nan]), np.array([1.0]))


def test_giou_loss_examples():
    t = np.array([[1.0, 2.0, 3.0, 1.5]])
    assert giou_loss(t.copy(), t, [1.0]).item() == 0.0
    # boxes (0,0,2,2) and (1,1,3,3) seen from the shared point (1.5, 1.5)
    pred = np.array([[1.5, 1.5, 0.5, 0.5]])
    target = np.array([[0.5, 0.5, 1.5, 1.5]])
    assert giou_loss(pred, target, [1.0]).item() == pytest.approx(1 + 2 / 9 - 1 / 7, abs=1e-14)
    assert round(giou_loss(pred, target, [1.0]).item(), 6) == 1.079365
    assert giou_loss(np.zeros((0, 4)), np.zeros((0, 4)), []).item() == 0.0


def test_giou_loss_weight_scale_invariance():
    rng = rng_for("giou-w")
    pred = rng.uniform(0.5, 3, size=(6, 4))
    target = rng.uniform(0.5, 3, size=(6, 4))
    w = rng.uniform(0.1, 1, size=6)
    assert giou_loss(pred, target, 2 * w).item() == pytest.approx(giou_loss(pred, target, w).item(), rel=1e-14)


def test_centerness_loss_examples():
    assert centerness_loss(np.array([0.0]), np.array([1.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert centerness_loss(np.zeros(0), np.zeros(0)).item() == 0.0


def test_centerness_loss_minimised_at_target():
    t = np.array([0.2, 0.5, 0.9])
    x = np.log(t / (1 - t))
    tape = Tape()
    xt = tape.watch(x)
    loss = centerness_loss(xt, t)
    entropy = -(t * np.log(t) + (1 - t) * np.log(1 - t)).mean()
    assert loss.item() == pytest.approx(entropy, rel=1e-12)
    assert np.allclose(backward(loss, tape)[xt], 0.0, atol=1e-15)


def test_pss_loss_examples():
    big = 40.0
    pss = np.full((1, 3, 1), -big)
    cls = np.full((1, 3, 2), -big)
    ctr = np.full((1, 3, 1), big)
    pss[0, 1, 0] = big
    cls[0, 1, 1] = big
    perfect = pss_loss(pss, cls, ctr, [assignment(1)], [np.array([1])])
    assert perfect.item() < 1e-12

    zeros = np.zeros((1, 1, 1))
    half = pss_loss(zeros, np.zeros((1, 1, 1)), zeros, [assignment(0)], [np.array([0])])
    assert half.item() == pytest.approx(focal_loss(np.array([0.125]), np.array([1.0])).item(), rel=1e-14)


def test_pss_loss_unselected_positive_is_negative():
    targets = one_to_one_targets((1, 4, 2), [assignment(2)], [np.array([1])])
    assert targets.sum() == 1 and targets[0, 2, 1] == 1.0
    with pytest.raises(ValueError):
        one_to_one_targets((1, 4, 2), [assignment(2, 2)], [np.array([0, 1])])


def test_pss_detach_partners_blocks_cls_and_ctr():
    rng = rng_for("detach")
    shapes = [(2, 5, 1), (2, 5, 3), (2, 5, 1)]
    for detach in (True, False):
        tape = Tape()
        pss, cls, ctr = (tape.watch(rng.normal(size=s)) for s in shapes)
        loss = pss_loss(pss, cls, ctr, [assignment(1), assignment(3)], [np.array([0]), np.array([2])],
                        detach_partners=detach)
        g = backward(loss, tape)
        assert np.any(g[pss] != 0)
        if detach:
            assert np.all(g[cls] == 0.0) and np.all(g[ctr] == 0.0)
        else:
            assert np.any(g[cls] != 0) and np.any(g[ctr] != 0)


def test_selection_probability_product():
    rng = rng_for("sel")
    a, b, c = rng.normal(size=(1, 4, 1)), rng.normal(size=(1, 4, 2)), rng.normal(size=(1, 4, 1))
    s = lambda z: 1 / (1 + np.exp(-z))
    expected = s(a) * s(b) * s(c)
    assert np.allclose(selection_probability(a, b, c).data, expected, rtol=1e-14)
    assert np.all(selection_probability(a, b, c).data <= np.minimum(s(a), s(b)) + 1e-15)


def test_ranking_examples():
    scores = np.array([[[0.6], [0.4]]])
    assert ranking_loss(scores, [assignment(0)], [np.array([0])], margin=0.5, num_neg=1).item() == \
        pytest.approx(0.3, abs=1e-15)
    clear = np.array([[[0.9], [0.2], [0.3]]])
    assert ranking_loss(clear, [assignment(0)], [np.array([0])], margin=0.5).item() == 0.0
    with pytest.raises(ValueError):
        ranking_loss(scores, [assignment(0)], [np.array([0])], margin=0.0)


def test_ranking_uses_hardest_negatives():
    scores = np.array([[[0.5], [0.1], [0.45], [0.3], [0.0]]])
    got = ranking_loss(scores, [assignment(0)], [np.array([0])], margin=0.5, num_neg=2).item()
    assert got == pytest.approx(((0.5 - 0.5 + 0.45) + (0.5 - 0.5 + 0.3)) / 2, abs=1e-15)


def test_breakdown_row():
    b = LossBreakdown(l_cls=1.0, l_pss=0.5, total=1.5)
    assert b.as_row()["l_pss"] == 0.5 and set(b.as_row()) >= {"l_cls", "l_reg", "l_ctr", "l_rank", "total"}


# ---------------------------------------------------------------- gradients

def test_focal_gradcheck():
    rng = rng_for("focal-g")
    t = (rng.random((3, 4)) < 0.3).astype(float)
    p = rng.uniform(0.05, 0.95, size=(3, 4))
    assert check(lambda x: focal_loss(x, t, normalizer=2.0), [p], rng) < 1e-4


def test_giou_gradcheck():
    rng = rng_for("giou-g")
    target = rng.uniform(0.5, 3, size=(5, 4))
    pred = target + rng.choice([-1, 1], size=(5, 4)) * rng.uniform(0.1, 0.4, size=(5, 4))
    w = rng.uniform(0.2, 1, size=5)
    assert check(lambda x: giou_loss(x, target, w), [pred], rng) < 1e-4


def test_centerness_gradcheck():
    rng = rng_for("ctr-g")
    t = rng.uniform(0, 1, size=7)
    assert check(lambda x: centerness_loss(x, t), [rng.normal(size=7)], rng) < 1e-4


def test_pss_gradcheck():
    rng = rng_for("pss-g")
    arrays = [rng.normal(size=(1, 4, 1)), rng.normal(size=(1, 4, 2)), rng.normal(size=(1, 4, 1))]
    for detach, wrt in ((True, [0]), (False, [0, 1, 2])):
        # detached partners are constants of the loss, so only pss is checked then
        fn = lambda a, b, c: pss_loss(a, b, c, [assignment(2)], [np.array([1])], detach_partners=detach)
        assert check(fn, arrays, rng, wrt=wrt) < 1e-4


def test_ranking_gradcheck():
    rng = rng_for("rank-g")
    s = rng.uniform(0, 1, size=(1, 6, 2))
    fn = lambda x: ranking_loss(x, [assignment(1, 4)], [np.array([0, 1])], margin=0.5, num_neg=3)
    assert check(fn, [s], rng) < 1e-4
