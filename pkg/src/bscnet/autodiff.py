"""A small tape-based reverse-mode differentiator over numpy arrays.

Operations executed while a :class:`Tape` is active, with at least one input
requiring gradients, are recorded in order.  ``Tape.backward`` walks the
record in reverse and accumulates gradients into :class:`Parameter` objects.
Outside a tape every op just computes values.
"""
from __future__ import annotations

import numpy as np

from .binarize import scaled_sign_grad, sign, sign_surrogate_grad
from .errors import AllIgnored, ShapeMismatch, UnrecordedNode

_TAPES: list = []


class Parameter:
    """A trainable array with an accumulated gradient."""

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = None
        self.name = name
        self.frozen = False

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Var:
    __slots__ = ("value", "tape", "requires_grad", "parents", "vjp", "param", "index")

    def __init__(self, value, tape=None, requires_grad=False, parents=(), vjp=None, param=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.param = param
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._leaves: dict[int, Var] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def release(self):
        """Drop recorded nodes so saved activations can be freed immediately."""
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes = []
        self._leaves = {}

    def watch(self, param: Parameter) -> Var:
        leaf = self._leaves.get(id(param))
        if leaf is None:
            leaf = Var(param.value, self, not param.frozen, param=param)
            self._append(leaf)
            self._leaves[id(param)] = leaf
        return leaf

    def record(self, value, parents, vjp) -> Var:
        node = Var(value, self, True, tuple(parents), vjp)
        self._append(node)
        return node

    def _append(self, node):
        node.index = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: Var) -> dict:
        """Accumulate d(loss)/d(param) into ``param.grad``; returns ``{param: grad}``."""
        if not isinstance(loss, Var) or loss.tape is not self or loss.index < 0:
            raise UnrecordedNode("loss was not recorded on this tape")
        if np.size(loss.value) != 1:
            raise ShapeMismatch("backward needs a scalar loss")
        grads = {loss.index: np.ones_like(np.asarray(loss.value, dtype=np.float64))}
        out = {}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.param is not None:
                p = node.param
                p.grad = g.copy() if p.grad is None else p.grad + g
                out[p] = p.grad
                continue
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, Var) or not parent.requires_grad:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        return out


def active_tape():
    return _TAPES[-1] if _TAPES else None


def param(p: Parameter) -> Var:
    """Use a parameter inside the current computation."""
    tape = active_tape()
    if tape is None:
        return Var(p.value)
    return tape.watch(p)


def constant(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def value(x):
    return x.value if isinstance(x, Var) else x


def op(out, parents, vjp) -> Var:
    """Wrap ``out`` as the result of an op; records it if any parent needs grads."""
    tape = active_tape()
    if tape is not None and any(isinstance(p, Var) and p.requires_grad for p in parents):
        return tape.record(out, parents, vjp)
    return Var(out)


def needs_grad(x) -> bool:
    return isinstance(x, Var) and x.requires_grad


def unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise / linear algebra ---------------------------------------------


def add(a, b):
    a, b = constant(a), constant(b)
    return op(a.value + b.value, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = constant(a), constant(b)
    return op(a.value - b.value, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return op(
        av * bv,
        (a, b),
        lambda g: (
            unbroadcast(g * bv, np.shape(av)) if needs_grad(a) else None,
            unbroadcast(g * av, np.shape(bv)) if needs_grad(b) else None,
        ),
    )


def div(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return op(
        av / bv,
        (a, b),
        lambda g: (
            unbroadcast(g / bv, np.shape(av)) if needs_grad(a) else None,
            unbroadcast(-g * av / (bv * bv), np.shape(bv)) if needs_grad(b) else None,
        ),
    )


def matmul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return op(
        av @ bv,
        (a, b),
        lambda g: (
            g @ bv.T if needs_grad(a) else None,
            av.T @ g if needs_grad(b) else None,
        ),
    )


def sum(a, axis=None):
    a = constant(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return op(np.sum(a.value, axis=axis), (a,), vjp)


def mean(a, axis=None):
    a = constant(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def abs(a):
    a = constant(a)
    s = sign(a.value)
    return op(np.abs(a.value), (a,), lambda g: (g * s,))


def exp(a):
    a = constant(a)
    out = np.exp(a.value)
    return op(out, (a,), lambda g: (g * out,))


def log(a):
    a = constant(a)
    return op(np.log(a.value), (a,), lambda g: (g / a.value,))


def sigmoid(a):
    a = constant(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a):
    """Row-wise softmax over the last axis."""
    a = constant(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return op(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def reshape(a, shape):
    a = constant(a)
    old = a.shape
    return op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(items, axis=-1):
    items = [constant(x) for x in items]
    sizes = [x.shape[axis] for x in items]
    splits = np.cumsum(sizes)[:-1]
    return op(
        np.concatenate([x.value for x in items], axis=axis),
        items,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_rows(a, rows):
    """``a[rows]`` with repeated rows allowed."""
    a = constant(a)
    rows = np.asarray(rows, dtype=np.int64)
    n = a.shape[0]

    def vjp(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, rows, g)
        return (out,)

    return op(a.value[rows], (a,), vjp)


def slice_cols(a, start, stop):
    a = constant(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return op(a.value[..., start:stop], (a,), vjp)


# -- binarization -------------------------------------------------------------


def sign_act(a):
    """Activation binarization; backward is the piecewise-polynomial surrogate."""
    a = constant(a)
    x = a.value
    return op(sign(x), (a,), lambda g: (g * sign_surrogate_grad(x),))


def scaled_sign(w, scale_axes=None):
    """``mean|W| * sign(W)`` with clipped-STE backward.

    ``scale_axes=None`` uses one scale for the whole tensor.  Otherwise the
    mean is taken over ``scale_axes`` (one scale per remaining index).
    """
    w = constant(w)
    wv = w.value
    s = sign(wv)
    if scale_axes is None:
        scale = np.mean(np.abs(wv))
        return op(scale * s, (w,), lambda g: (scaled_sign_grad(g, wv),))
    scale = np.mean(np.abs(wv), axis=scale_axes, keepdims=True)
    count = np.prod([wv.shape[ax] for ax in np.atleast_1d(scale_axes)])

    def vjp(g):
        ste = np.where(np.abs(wv) <= 1.0, g, 0.0)
        return (scale * ste + s * (np.sum(g * s, axis=scale_axes, keepdims=True) / count),)

    return op(scale * s, (w,), vjp)


# -- layers -------------------------------------------------------------------


def prelu(x, slopes):
    x, slopes = constant(x), constant(slopes)
    xv, a = x.value, slopes.value
    pos = xv >= 0
    return op(
        np.where(pos, xv, a * xv),
        (x, slopes),
        lambda g: (
            np.where(pos, g, a * g) if needs_grad(x) else None,
            np.sum(np.where(pos, 0.0, g * xv), axis=0) if needs_grad(slopes) else None,
        ),
    )


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Normalize over rows with batch statistics; returns ``(y, mean, var)``."""
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    xv = x.value
    n = xv.shape[0]
    mu = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0) if needs_grad(gamma) else None
        dbeta = g.sum(axis=0) if needs_grad(beta) else None
        dx = None
        if needs_grad(x):
            dxh = g * gv
            dx = (inv / n) * (n * dxh - dxh.sum(axis=0) - xhat * (dxh * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    return op(gv * xhat + beta.value, (x, gamma, beta), vjp), mu, var


def cross_entropy(logits, labels, ignore_label: int = -100):
    """Mean negative log-softmax over sites whose label is not ``ignore_label``."""
    logits = constant(logits)
    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.value
    if labels.shape[0] != lv.shape[0]:
        raise ShapeMismatch("one label per site required")
    valid = labels != ignore_label
    n = int(valid.sum())
    if n == 0:
        raise AllIgnored("every site carries the ignore label")
    z = lv - lv.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, labels[rows]].sum() / n

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels[rows]] -= 1.0
        d[~valid] = 0.0
        return (g * d / n,)

    return op(np.asarray(loss), (logits,), vjp)
