"""Reverse-mode automatic differentiation on an explicit tape.

Forward values are computed with exactly the kernels the reference executor
uses, so gradients are those of the reference evaluation order.  Each op
records a vector-Jacobian product; :func:`backward` replays the tape in
reverse, accumulating into gradients in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .tensor import check_finite


class Var:
    __slots__ = ("name", "value", "parents", "tape", "index")

    def __init__(self, tape, value, name=None, parents=()):
        self.tape = tape
        self.value = value
        self.name = name
        # (parent Var, vjp: upstream grad -> grad contribution for that parent)
        self.parents = parents
        self.index = len(tape.vars)
        tape.vars.append(self)

    @property
    def shape(self):
        return self.value.shape


@dataclass(frozen=True)
class GradRecord:
    node: str
    grad: np.ndarray
    reachable: bool


class Tape:
    def __init__(self):
        self.vars = []

    def leaf(self, value, name):
        return Var(self, np.asarray(value), name)

    def const(self, value):
        return Var(self, np.asarray(value), None)

    def op(self, value, parents):
        return Var(self, value, None, tuple(parents))


def backward(tape: Tape, loss: Var, wrt):
    """Gradients of scalar ``loss`` for each Var in ``wrt``, keyed by name.

    Vars not reachable backward from the loss get a zero gradient with
    ``reachable=False``.
    """
    if loss.value.shape != ():
        raise ShapeError(f"loss must be a scalar, got shape {loss.value.shape}")
    for v in wrt:
        if v.tape is not tape:
            raise ConfigError(f"{v.name!r} was recorded on a different tape")
    grads = {loss.index: np.ones((), dtype=loss.value.dtype)}
    for idx in range(loss.index, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        var = tape.vars[idx]
        for parent, vjp in var.parents:
            contrib = vjp(g)
            prev = grads.get(parent.index)
            grads[parent.index] = contrib if prev is None else prev + contrib
    out = {}
    for v in wrt:
        g = grads.get(v.index)
        name = v.name if v.name is not None else f"var{v.index}"
        if g is None:
            out[name] = GradRecord(name, np.zeros_like(v.value), False)
        else:
            out[name] = GradRecord(name, check_finite(np.asarray(g, dtype=v.value.dtype), f"gradient of {name}"), True)
    return out


# --------------------------------------------------------------------------- layer ops

def dense(x: Var, w: Var, b: Var):
    xv = np.ascontiguousarray(x.value)
    y = kernels.dense_forward(xv, w.value, b.value, 0, False, False)

    cache = {}

    def grads(g):
        if "r" not in cache:
            cache["r"] = kernels.dense_backward(xv, w.value, np.ascontiguousarray(g))
        return cache["r"]

    # the three VJPs share a single backward kernel call
    return x.tape.op(y, [(x, lambda g: grads(g)[0]), (w, lambda g: grads(g)[1]), (b, lambda g: grads(g)[2])])


def conv2d(x: Var, k: Var, b: Var, stride=1, pad=0):
    xv = np.ascontiguousarray(x.value)
    y = kernels.conv2d_forward(xv, k.value, b.value, stride, pad, 0, False, False)
    cache = {}

    def grads(g):
        if "r" not in cache:
            cache["r"] = kernels.conv2d_backward(xv, k.value, np.ascontiguousarray(g), stride, pad)
        return cache["r"]

    return x.tape.op(y, [(x, lambda g: grads(g)[0]), (k, lambda g: grads(g)[1]), (b, lambda g: grads(g)[2])])


def _channel_view(p, ndim):
    return p.reshape((1, -1) + (1,) * (ndim - 2))


def affine(x: Var, scale: Var, shift: Var):
    s = _channel_view(scale.value, x.value.ndim)
    t = _channel_view(shift.value, x.value.ndim)
    y = x.value * s + t
    axes = (0,) + tuple(range(2, x.value.ndim))
    return x.tape.op(y, [
        (x, lambda g: g * s),
        (scale, lambda g: np.sum(g * x.value, axis=axes)),
        (shift, lambda g: np.sum(g, axis=axes)),
    ])


def sub_const(x: Var, c):
    """``x - c`` for a scalar ``c``; pass a 0-d Var to get its gradient too."""
    if not isinstance(c, Var):
        return x.tape.op(x.value - c, [(x, lambda g: g)])
    cv = c.value[()]
    return x.tape.op(x.value - cv, [(x, lambda g: g), (c, lambda g: -np.sum(g).astype(g.dtype))])


def div_const(x: Var, c):
    if not isinstance(c, Var):
        return x.tape.op(x.value / c, [(x, lambda g: g / c)])
    cv = c.value[()]
    y = x.value / cv
    return x.tape.op(y, [(x, lambda g: g / cv), (c, lambda g: (-np.sum(g * y) / cv).astype(g.dtype))])


def sub_channel(x: Var, v):
    """``x - v`` with ``v`` broadcast along the channel axis (axis 1)."""
    vv = _channel_view(np.asarray(v, dtype=x.value.dtype), x.value.ndim)
    return x.tape.op(x.value - vv, [(x, lambda g: g)])


def relu(x: Var):
    mask = x.value > 0
    zero = x.value.dtype.type(0)
    return x.tape.op(np.where(mask, x.value, zero), [(x, lambda g: np.where(mask, g, zero))])


def flatten(x: Var):
    shape = x.value.shape
    return x.tape.op(x.value.reshape(shape[0], -1), [(x, lambda g: g.reshape(shape))])


def patch_overwrite(x: Var, patch: Var, row, col):
    """Overwrite ``x[..., row:row+s, col:col+s]`` by ``patch`` ([C, s, s]) on every sample."""
    s = patch.value.shape[-1]
    region = (Ellipsis, slice(row, row + s), slice(col, col + s))
    y = np.array(x.value, copy=True)
    y[region] = patch.value

    def gx(g):
        g = np.array(g, copy=True)
        g[region] = 0
        return g

    return x.tape.op(y, [(x, gx), (patch, lambda g: np.sum(g[region], axis=0))])


def add(a: Var, b: Var):
    return a.tape.op(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def scale_by(x: Var, c):
    return x.tape.op(x.value * x.value.dtype.type(c), [(x, lambda g: g * x.value.dtype.type(c))])


def total(x: Var):
    return x.tape.op(np.sum(x.value).astype(x.value.dtype), [(x, lambda g: np.broadcast_to(g, x.value.shape).copy())])


# --------------------------------------------------------------------------- losses

def log_softmax(z):
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def cross_entropy(logits: Var, labels):
    """Mean stable cross-entropy over the batch."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    lsm = log_softmax(z)
    loss = -np.mean(lsm[np.arange(n), labels]).astype(z.dtype)

    def vjp(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1
        return (g * p / z.dtype.type(n)).astype(z.dtype)

    return logits.tape.op(np.asarray(loss, dtype=z.dtype), [(logits, vjp)])


def mse(x: Var, target):
    target = np.broadcast_to(np.asarray(target, dtype=x.value.dtype), x.value.shape)
    diff = x.value - target
    count = x.value.dtype.type(diff.size)
    loss = np.asarray(np.mean(diff * diff), dtype=x.value.dtype)
    return x.tape.op(loss, [(x, lambda g: (g * 2 * diff / count).astype(x.value.dtype))])


def top2(z):
    """Indices of the largest and second-largest entry per row (lowest index wins ties)."""
    order = np.argsort(-z, axis=1, kind="stable")
    return order[:, 0], order[:, 1]


def top2_gap_sq(logits: Var):
    """Sum over rows of (largest - second largest)^2, indices chosen at this evaluation."""
    z = logits.value
    i1, i2 = top2(z)
    rows = np.arange(z.shape[0])
    gap = z[rows, i1] - z[rows, i2]
    loss = np.asarray(np.sum(gap * gap), dtype=z.dtype)

    def vjp(g):
        out = np.zeros_like(z)
        out[rows, i1] += 2 * gap * g
        out[rows, i2] -= 2 * gap * g
        return out

    return logits.tape.op(loss, [(logits, vjp)])


# --------------------------------------------------------------------------- model tracing

def param_name(node_id, key):
    return f"{node_id}.{key}"


def trace(model, x, tape=None, input_var=None, params=None):
    """Record the reference forward pass of ``model`` on ``x``.

    Returns ``(tape, input_var, output_var, param_vars)``; ``param_vars`` maps
    ``"<node>.<param>"`` to leaf Vars (pass ``params`` to substitute values).
    """
    tape = tape or Tape()
    if input_var is None:
        input_var = tape.leaf(np.asarray(x), "input")
    cur = input_var
    pvars = {}
    params = params or {}
    for node in model.nodes:
        leaves = {}
        for key, val in node.params.items():
            name = param_name(node.id, key)
            leaves[key] = tape.leaf(params.get(name, val), name)
            pvars[name] = leaves[key]
        k = node.kind
        if k == "Dense":
            cur = dense(cur, leaves["W"], leaves["b"])
        elif k == "Conv2d":
            cur = conv2d(cur, leaves["kernels"], leaves["bias"],
                         int(node.attrs.get("stride", 1)), int(node.attrs.get("padding", 0)))
        elif k == "AffinePerChannel":
            cur = affine(cur, leaves["scale"], leaves["shift"])
        elif k == "SubConst":
            cur = sub_const(cur, leaves["c"])
        elif k == "DivConst":
            cur = div_const(cur, leaves["c"])
        elif k == "Relu":
            cur = relu(cur)
        elif k == "Flatten":
            cur = flatten(cur)
        # Input and Output are identities
    return tape, input_var, cur, pvars
