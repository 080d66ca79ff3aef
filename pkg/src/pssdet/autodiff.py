"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs are tracked. Values that
are not on a tape (images, targets, anything passed through
:func:`stop_gradient`) are constants: nothing upstream of them is visited on
the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class _Node:
    __slots__ = ("inputs", "vjp", "shape")

    def __init__(self, inputs, vjp, shape):
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Ordered record of operations; rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _add(self, inputs, vjp, shape) -> int:
        self.nodes.append(_Node(inputs, vjp, shape))
        return len(self.nodes) - 1

    def watch(self, value) -> "Tensor":
        """Register ``value`` as a leaf whose gradient will be collected."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        t = Tensor(data)
        t.tape = self
        t.node = self._add((), None, t.data.shape)
        return t


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape: Tape | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data``; record on the tape only if some input is tracked.

    ``vjp(g)`` returns one gradient (or None) per input.
    """
    out = Tensor(data)
    tape = None
    for t in inputs:
        if t.node is not None:
            tape = t.tape
            break
    if tape is not None:
        out.tape = tape
        ids = tuple(t.node if t.tape is tape else None for t in inputs)
        out.node = tape._add(ids, vjp, out.data.shape)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def pow_scalar(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(xd ** exponent, (x,),
                   lambda g: (g * exponent * xd ** (exponent - 1),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = as_tensor(x)
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    return _result(out, (x,), lambda g: (g * _sigmoid(-xd),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def stop_gradient(x) -> Tensor:
    """Forward identity; the edge back to ``x`` is cut.

    The result becomes a fresh leaf on ``x``'s tape (so it still receives a
    gradient of its own) but nothing flows further upstream.
    """
    x = as_tensor(x)
    out = Tensor(x.data)
    if x.tracked:
        out.tape = x.tape
        out.node = x.tape._add((), None, x.shape)
    return out


# -- shape ops -------------------------------------------------------------


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return reduce_sum(x, axis) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    """Basic slicing or integer-array gathering; scatter-add on backward."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result(np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def max_channel(x) -> Tensor:
    """Max over axis 1 of an NCHW tensor; gradient goes to the first argmax."""
    x = as_tensor(x)
    idx = x.data.argmax(axis=1)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(out, idx[:, None], g[:, None], axis=1)
        return (out,)

    return _result(np.take_along_axis(x.data, idx[:, None], axis=1)[:, 0], (x,), vjp)


# -- convolution and resampling ------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKK weights, zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"conv2d kernel must be square, got axes 2,3 = {k},{k2}")
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input axis 1 = {c}, weight axis 1 = {ci}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d bias shape {bias.shape} does not match weight axis 0 = {o}")
    p, s = padding, stride
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input axes 2,3 = {h},{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.tracked else None
        gb = g2.sum(axis=0) if bias is not None and bias.tracked else None
        gx = None
        if x.tracked:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += gcols[:, :, ky, kx]
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(np.ascontiguousarray(out), inputs, vjp)


def _upsample_matrix(n: int) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False)
    m = np.zeros((2 * n, n), dtype=DTYPE)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample2x(x) -> Tensor:
    """Bilinear 2x upsampling of an NCHW tensor."""
    x = as_tensor(x)
    ah = _upsample_matrix(x.shape[2])
    aw = _upsample_matrix(x.shape[3])
    out = ah @ x.data @ aw.T
    return _result(out, (x,), lambda g: (ah.T @ g @ aw,))


# -- backward --------------------------------------------------------------


class Gradients:
    """Gradient map returned by :func:`backward`, keyed by tensor."""

    def __init__(self, grads: dict[int, np.ndarray], tape: Tape):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None or t.tape is not self._tape:
            return np.zeros(t.shape, dtype=DTYPE)
        g = self._grads.get(t.node)
        return np.zeros(t.shape, dtype=DTYPE) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.node is not None and t.node in self._grads


def backward(loss: Tensor, tape: Tape | None = None) -> Gradients:
    """Accumulate d(loss)/d(node) for every node reachable from ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss.tape
    if tape is None or loss.node is None:
        return Gradients({}, tape or Tape())
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on the given tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape, dtype=DTYPE)}
    nodes = tape.nodes
    for i in range(loss.node, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src is None or gi is None:
                continue
            prev = grads.get(src)
            grads[src] = gi if prev is None else prev + gi
    return Gradients(grads, tape)


# -- optimizer -------------------------------------------------------------


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: SgdState, names: Sequence[str] | None = None,
             lr_scale: dict[str, float] | None = None) -> dict[str, np.ndarray]:
    """v <- m*v + g + wd*p ; p <- p - lr*v.  Returns a new parameter dict.

    Only ``names`` (default: all keys of ``grads``) are updated; everything
    else is passed through untouched. ``lr_scale`` multiplies the learning
    rate of individual parameters.
    """
    names = list(grads) if names is None else list(names)
    out = dict(params)
    for name in names:
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise DimensionError(f"sgd_step: {name} has shape {p.shape} but gradient {g.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise DimensionError(f"sgd_step: velocity for {name} has shape {v.shape}, expected {p.shape}")
        v = state.momentum * v + g + state.weight_decay * p
        state.velocity[name] = v
        lr = state.learning_rate * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        out[name] = p - lr * v
    return out
