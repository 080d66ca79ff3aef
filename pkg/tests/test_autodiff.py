import itertools
import zlib

import numpy as np
import pytest

from pssdet import autodiff as ad
from pssdet.autodiff import DimensionError, SgdState, Tape, Tensor, backward, sgd_step

from gradcheck import away_from_zero, check


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[ni, ci, i * stride + ki, j * stride + kj] * w[oi, ci, ki, kj]
                    out[ni, oi, i, j] = acc
    return out


def test_conv_all_ones_center():
    out = ad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
    assert out.data[0, 0, 1, 1] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    fast = ad.conv2d(x, w, b, stride, pad).data
    np.testing.assert_allclose(fast, naive_conv(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_output_size():
    out = ad.conv2d(np.zeros((1, 2, 9, 7)), np.zeros((3, 2, 3, 3)), None, stride=2, padding=1)
    assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


@pytest.mark.parametrize("xs,ws,msg", [
    ((1, 2, 5, 5), (3, 4, 3, 3), "axis 1"),
    ((1, 2, 5, 5), (3, 2, 3, 2), "square"),
    ((2, 5, 5), (3, 2, 3, 3), "4-d"),
])
def test_conv_dimension_errors(xs, ws, msg):
    with pytest.raises(DimensionError, match=msg):
        ad.conv2d(np.zeros(xs), np.zeros(ws))


def test_sigmoid_values():
    assert ad.sigmoid(0.0).item() == 0.5
    assert ad.sigmoid(np.log(3.0)).item() == pytest.approx(0.75, abs=1e-15)
    tape = Tape()
    x = tape.watch(-50.0)
    y = ad.sigmoid(x)
    assert y.item() > 0
    assert np.isfinite(backward(y, tape)[x]).all()


def test_stop_gradient_partial_cut():
    tape = Tape()
    x = tape.watch(3.0)
    y = ad.stop_gradient(x) * x
    assert backward(y, tape)[x] == 3.0


def test_stop_gradient_full_cut():
    tape = Tape()
    x = tape.watch(np.array([1.0, -2.0]))
    y = ad.stop_gradient(x).sum()
    np.testing.assert_array_equal(backward(y, tape)[x], [0.0, 0.0])


def test_stopped_inputs_give_bitwise_zero_parameter_grads():
    rng = np.random.default_rng(1)
    tape = Tape()
    w = tape.watch(rng.normal(size=(2, 1, 3, 3)))
    feat = ad.relu(ad.conv2d(rng.normal(size=(1, 1, 5, 5)), w, None, 1, 1))
    loss = ad.sigmoid(ad.stop_gradient(feat)).sum()
    g = backward(loss, tape)[w]
    assert g.tobytes() == np.zeros_like(g).tobytes()


def _masked_backward(loss, tape, cut_node, cut_input):
    """Reference: ordinary backward with one edge's adjoint zeroed."""
    node = tape.nodes[cut_node]
    original = node.vjp

    def vjp(g):
        out = list(original(g))
        out[cut_input] = None
        return tuple(out)

    node.vjp = vjp
    try:
        return backward(loss, tape)
    finally:
        node.vjp = original


def test_stop_gradient_equals_masked_edge():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a0, b0 = rng.normal(size=(3,)), rng.normal(size=(3,))
        # graph: y = sum(sigmoid(a*b) * a); cut the edge a -> (a*b)
        t1 = Tape()
        a, b = t1.watch(a0), t1.watch(b0)
        y1 = (ad.sigmoid(ad.stop_gradient(a) * b) * a).sum()
        g1 = backward(y1, t1)
        t2 = Tape()
        a2, b2 = t2.watch(a0), t2.watch(b0)
        prod = a2 * b2
        y2 = (ad.sigmoid(prod) * a2).sum()
        g2 = _masked_backward(y2, t2, prod.node, 0)
        assert np.array_equal(g1[a], g2[a2])
        assert np.array_equal(g1[b], g2[b2])


def test_backward_linear_form():
    x = np.array([1.0, -2.0, 0.5])
    tape = Tape()
    w = tape.watch(np.zeros(3))
    np.testing.assert_array_equal(backward((w * x).sum(), tape)[w], x)


def test_backward_linearity_of_summed_losses():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(4,))

    def losses(tape):
        w = tape.watch(w0)
        return w, ad.exp(w).sum(), (ad.sigmoid(w) * w).sum()

    t = Tape()
    w, l1, l2 = losses(t)
    both = backward(l1 + l2, t)[w]
    t = Tape()
    w, l1, _ = losses(t)
    g1 = backward(l1, t)[w]
    t = Tape()
    w, _, l2 = losses(t)
    g2 = backward(l2, t)[w]
    np.testing.assert_allclose(both, g1 + g2, rtol=1e-15, atol=0)


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(DimensionError):
        backward(x * 2.0, tape)


def test_backward_gradient_of_loss_wrt_itself_is_one():
    tape = Tape()
    x = tape.watch(2.0)
    y = x * 1.0
    assert backward(y, tape)[y] == 1.0


def test_tape_is_topologically_ordered():
    tape = Tape()
    x = tape.watch(np.ones((1, 1, 4, 4)))
    w = tape.watch(np.ones((1, 1, 3, 3)))
    y = ad.sigmoid(ad.conv2d(x, w, None, 1, 1)).sum()
    for i, node in enumerate(tape.nodes):
        assert all(src is None or src < i for src in node.inputs)
    g = backward(y, tape)
    assert g[x].shape == x.shape and g[w].shape == w.shape


def test_sgd_examples():
    st = SgdState(learning_rate=1.0, momentum=0.0, weight_decay=0.0)
    assert sgd_step({"p": np.array(1.0)}, {"p": np.array(0.5)}, st)["p"] == 0.5
    st = SgdState(0.1, 0.9, 0.0)
    p = {"p": np.array([1.0, 2.0])}
    assert np.array_equal(sgd_step(p, {"p": np.zeros(2)}, st)["p"], p["p"])


def test_sgd_two_steps_match_hand_recursion():
    lr, m, wd = 0.05, 0.9, 1e-3
    p0, g1, g2 = 1.5, 0.4, -0.7
    st = SgdState(lr, m, wd)
    p1 = sgd_step({"p": np.array(p0)}, {"p": np.array(g1)}, st)["p"]
    p2 = sgd_step({"p": p1}, {"p": np.array(g2)}, st)["p"]
    v1 = g1 + wd * p0
    q1 = p0 - lr * v1
    v2 = m * v1 + g2 + wd * q1
    q2 = q1 - lr * v2
    assert abs(p1 - q1) < 1e-12 and abs(p2 - q2) < 1e-12


def test_sgd_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, SgdState())


def test_sgd_state_validation():
    with pytest.raises(ValueError):
        SgdState(momentum=1.0)
    with pytest.raises(ValueError):
        SgdState(weight_decay=-1.0)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        tape = Tape()
        w = tape.watch(rng.normal(size=(3, 2, 3, 3)))
        x = rng.normal(size=(2, 2, 6, 6))
        y = ad.sigmoid(ad.upsample2x(ad.conv2d(x, w, None, 2, 1))).sum()
        return y.data.tobytes(), backward(y, tape)[w].tobytes()

    assert run() == run()


def test_upsample_constant_and_shape():
    out = ad.upsample2x(np.full((1, 2, 3, 4), 2.5))
    assert out.shape == (1, 2, 6, 8)
    np.testing.assert_allclose(out.data, 2.5)


def test_max_channel_value():
    x = np.array([[[[1.0]], [[3.0]], [[2.0]]]])
    assert ad.max_channel(x).data[0, 0, 0] == 3.0


# -- gradient checks -------------------------------------------------------

ELEMENTWISE = {
    "add": (lambda a, b: a + b, 2),
    "sub": (lambda a, b: a - b, 2),
    "mul": (lambda a, b: a * b, 2),
    "div": (lambda a, b: a / b, 2),
    "exp": (lambda a: ad.exp(a), 1),
    "log": (lambda a: ad.log(ad.exp(a) + 0.5), 1),
    "sigmoid": (lambda a: ad.sigmoid(a), 1),
    "log_sigmoid": (lambda a: ad.log_sigmoid(a * 5.0), 1),
    "relu": (lambda a: ad.relu(a), 1),
    "minimum": (lambda a, b: ad.minimum(a, b), 2),
    "maximum": (lambda a, b: ad.maximum(a, b), 2),
    "clip": (lambda a: ad.clip(a, -1.0, 1.0), 1),
    "pow": (lambda a: ad.pow_scalar(ad.exp(a), 1.7), 1),
    "scalar_broadcast_mul": (lambda a, b: a * ad.reduce_sum(b), 2),
    "row_broadcast_add": (lambda a, b: a + b[0:1], 2),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_gradcheck_elementwise(name):
    fn, arity = ELEMENTWISE[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        arrays = [away_from_zero(rng, (3, 4)) for _ in range(arity)]
        if name in ("minimum", "maximum"):
            arrays[1] = arrays[0] + away_from_zero(rng, (3, 4))
        if name == "clip":
            arrays[0] = np.where(np.abs(np.abs(arrays[0]) - 1.0) < 0.05, 0.5, arrays[0])
        assert check(fn, arrays, rng) < 1e-4


SHAPE_OPS = {
    "sum_axis": (lambda a: ad.reduce_sum(a, axis=1), (3, 4)),
    "sum_keepdims": (lambda a: ad.reduce_sum(a, axis=0, keepdims=True) * a, (3, 4)),
    "mean": (lambda a: ad.mean(a, axis=0), (3, 4)),
    "reshape": (lambda a: ad.reshape(a, (2, 6)) * ad.reshape(a, (2, 6)), (3, 4)),
    "transpose": (lambda a: ad.transpose(a, (1, 0, 2)), (2, 3, 2)),
    "slice": (lambda a: a[1:, ::2], (3, 4)),
    "gather": (lambda a: a[np.array([0, 2, 0]), np.array([1, 3, 1])], (3, 4)),
    "concat": (lambda a: ad.concat([a, a * a], axis=1), (3, 4)),
    "max_channel": (lambda a: ad.max_channel(a), (2, 3, 2, 2)),
    "upsample2x": (lambda a: ad.upsample2x(a), (1, 2, 3, 4)),
}


@pytest.mark.parametrize("name", sorted(SHAPE_OPS))
def test_gradcheck_shape_ops(name):
    fn, shape = SHAPE_OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        assert check(fn, [away_from_zero(rng, shape)], rng) < 1e-4


@pytest.mark.parametrize("stride,pad", list(itertools.product([1, 2], [0, 1])))
def test_gradcheck_conv(stride, pad):
    rng = np.random.default_rng(11 + stride + pad)
    for _ in range(5):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        assert check(lambda x, w, b: ad.conv2d(x, w, b, stride, pad), [x, w, b], rng) < 1e-4
