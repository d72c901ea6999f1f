"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Graph` is an append-only list of nodes. Leaves are inputs (bound at
evaluation time), parameters (backed by a caller-owned array) and constants.
Every other node applies one operation to earlier nodes, so graphs are acyclic
by construction.

Parameters are either *trainable* or *frozen*. Frozen parameters take part in
the forward pass and gradients flow through the operations that consume them,
but :class:`Adam` never updates them. Building the graph with
``frozen_grads=False`` skips computing the (unused) gradient of the frozen
leaves themselves, which is what training loops want.

Example
-------
>>> import numpy as np
>>> g = Graph(np.float64)
>>> x = g.param(np.array([3.0]), name="x")
>>> loss = g.mean(g.mul(x, x))
>>> _ = g.evaluate()
>>> float(g.backward(loss)[x][0])
6.0
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import GraphStateError, NonFiniteError, ShapeError

__all__ = [
    "Node",
    "Graph",
    "AdamState",
    "Adam",
    "adam_step",
    "check_gradients",
]


class Node:
    __slots__ = (
        "id", "kind", "inputs", "attrs", "name", "role", "trainable",
        "requires_grad", "source", "shape", "value", "cache",
    )

    def __init__(self, id, kind, inputs=(), attrs=None, name=None, role="op"):
        self.id = id
        self.kind = kind
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name or f"{kind}#{id}"
        self.role = role
        self.trainable = False
        self.requires_grad = False
        self.source = None
        self.shape = None
        self.value = None
        self.cache = None

    @property
    def frozen(self):
        return self.role == "param" and not self.trainable

    def __repr__(self):
        return f"Node({self.name!r}, kind={self.kind!r})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _all_finite(a):
    # the sum is finite for almost every finite array; fall back on overflow
    return bool(np.isfinite(a.sum())) or bool(np.isfinite(a).all())


def _shape_error(node, what, expected, actual):
    return ShapeError(
        f"node {node.name!r}: {what} expected shape {expected}, got {tuple(actual)}"
    )


# ---------------------------------------------------------------------------
# operation kernels: forward(node, *values) -> (out, cache)
#                    backward(node, gout, values, out, cache, needs) -> grads
# ---------------------------------------------------------------------------

def _affine_fwd(node, x, w, b=None):
    if w.ndim < 2:
        raise _shape_error(node, "weight", "(..., out, in)", w.shape)
    if x.shape[-1] != w.shape[-1]:
        raise _shape_error(node, "input", f"(..., {w.shape[-1]})", x.shape)
    if b is not None and b.shape != w.shape[:-1]:
        raise _shape_error(node, "bias", w.shape[:-1], b.shape)
    vector = x.ndim == 1
    xm = x[None, :] if vector else x
    out = np.matmul(xm, np.swapaxes(w, -1, -2))
    if b is not None:
        out += b if w.ndim == 2 else b[..., None, :]
    if vector:
        out = out.reshape(out.shape[:-2] + out.shape[-1:])
    return out, vector


def _affine_bwd(node, g, values, out, vector, needs):
    x, w = values[0], values[1]
    xm = x[None, :] if vector else x
    gm = np.expand_dims(g, -2) if vector else g
    grads = [None] * len(values)
    if needs[0]:
        dx = np.matmul(gm, w)
        grads[0] = _unbroadcast(dx, xm.shape).reshape(x.shape)
    if needs[1]:
        dw = np.matmul(np.swapaxes(gm, -1, -2), xm)
        grads[1] = _unbroadcast(dw, w.shape)
    if len(values) > 2 and needs[2]:
        db = gm.sum(axis=-2)
        grads[2] = _unbroadcast(db, values[2].shape)
    return grads


def _check_conv_input(node, x, w, channel_axis):
    if x.ndim != 4:
        raise _shape_error(node, "input", "(N, C, H, W)", x.shape)
    if w.ndim != 4 or x.shape[1] != w.shape[channel_axis]:
        expected = ["O", "I", "kh", "kw"] if channel_axis == 1 else ["I", "O", "kh", "kw"]
        expected[channel_axis] = str(x.shape[1])
        raise _shape_error(node, "weight", "(" + ", ".join(expected) + ")", w.shape)


def _conv_fwd(node, x, w, b=None):
    _check_conv_input(node, x, w, channel_axis=1)
    s, p = node.attrs["stride"], node.attrs["pad"]
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = (h + 2 * p - kh) // s + 1, (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise _shape_error(node, "padded input", f"(N, C, >={kh}, >={kw})", (n, c, h + 2 * p, wd + 2 * p))
    # im2col in (C, kh, kw, N, Ho, Wo) order so both GEMMs see contiguous operands
    xp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + wd] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        if b.shape != (o,):
            raise _shape_error(node, "bias", (o,), b.shape)
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), cols


def _conv_bwd(node, g, values, out, cols, needs):
    x, w = values[0], values[1]
    s, p = node.attrs["stride"], node.attrs["pad"]
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
    grads = [None] * len(values)
    if needs[1]:
        grads[1] = (gt @ cols.T).reshape(w.shape)
    if len(values) > 2 and needs[2]:
        grads[2] = gt.sum(axis=1)
    if needs[0]:
        dcols = (w.reshape(o, -1).T @ gt).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
        grads[0] = np.ascontiguousarray(dxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3))
    return grads


def _conv_t_fwd(node, x, w, b=None):
    _check_conv_input(node, x, w, channel_axis=0)
    s, p = node.attrs["stride"], node.attrs["pad"]
    n, _, h, wd = x.shape
    cout, kh, kw = w.shape[1:]
    hf, wf = (h - 1) * s + kh, (wd - 1) * s + kw
    ho, wo = hf - 2 * p, wf - 2 * p
    if ho < 1 or wo < 1:
        raise _shape_error(node, "output", "positive spatial extent", (n, cout, ho, wo))
    cols = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, Cout, kh, kw)
    full = np.zeros((n, cout, hf, wf), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + s * h:s, j:j + s * wd:s] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, p:p + ho, p:p + wo]
    if b is not None:
        if b.shape != (cout,):
            raise _shape_error(node, "bias", (cout,), b.shape)
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (hf, wf)


def _conv_t_bwd(node, g, values, out, cache, needs):
    x, w = values[0], values[1]
    s, p = node.attrs["stride"], node.attrs["pad"]
    hf, wf = cache
    kh, kw = w.shape[2:]
    gfull = np.zeros((g.shape[0], g.shape[1], hf, wf), dtype=g.dtype)
    gfull[:, :, p:p + g.shape[2], p:p + g.shape[3]] = g
    win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    grads = [None] * len(values)
    if needs[0]:
        dx = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        grads[0] = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
    if needs[1]:
        grads[1] = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    if len(values) > 2 and needs[2]:
        grads[2] = g.sum(axis=(0, 2, 3))
    return grads


def _sin_fwd(node, x):
    omega = node.attrs["omega"]
    if omega == 1.0:
        return np.sin(x), None
    t = x * omega
    return np.sin(t, out=t), None


def _sin_bwd(node, g, values, out, cache, needs):
    omega = node.attrs["omega"]
    x = values[0]
    c = np.cos(x) if omega == 1.0 else np.cos(x * omega)
    c *= g
    if omega != 1.0:
        c *= omega
    return [c]


def _relu_fwd(node, x):
    return np.maximum(x, 0), None


def _relu_bwd(node, g, values, out, cache, needs):
    # subgradient at 0 is 0
    return [g * (values[0] > 0)]


def _reshape_fwd(node, x):
    try:
        return x.reshape(node.attrs["shape"]), None
    except ValueError:
        raise _shape_error(node, "reshape target", node.attrs["shape"], x.shape) from None


def _reshape_bwd(node, g, values, out, cache, needs):
    return [g.reshape(values[0].shape)]


def _concat_fwd(node, *xs):
    axis = node.attrs["axis"]
    try:
        return np.concatenate(xs, axis=axis), None
    except ValueError:
        shapes = [x.shape for x in xs]
        raise ShapeError(f"node {node.name!r}: cannot concatenate shapes {shapes} on axis {axis}") from None


def _concat_bwd(node, g, values, out, cache, needs):
    axis = node.attrs["axis"]
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return np.split(g, splits, axis=axis)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_fwd(node, x):
    return _softmax(x), None


def _softmax_bwd(node, g, values, out, cache, needs):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _xent_fwd(node, logits):
    labels = node.attrs["labels"]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error(node, "logits", f"({labels.shape[0]}, C)", logits.shape)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(len(labels))
    loss = np.mean(lse - z[rows, labels])
    return np.asarray(loss, dtype=logits.dtype), None


def _xent_bwd(node, g, values, out, cache, needs):
    logits = values[0]
    labels = node.attrs["labels"]
    grad = _softmax(logits)
    grad[np.arange(len(labels)), labels] -= 1
    return [grad * (g / len(labels))]


def _mse_fwd(node, pred, target):
    if pred.shape != target.shape:
        raise _shape_error(node, "target", pred.shape, target.shape)
    d = pred - target
    return np.asarray(node.attrs["scale"] * np.mean(d * d), dtype=pred.dtype), None


def _mse_bwd(node, g, values, out, cache, needs):
    pred, target = values
    d = (2.0 * node.attrs["scale"] / pred.size) * (pred - target) * g
    return [d if needs[0] else None, -d if needs[1] else None]


def _mean_fwd(node, x):
    axis, keep = node.attrs["axis"], node.attrs["keepdims"]
    return np.asarray(x.mean(axis=axis, keepdims=keep), dtype=x.dtype), None


def _mean_bwd(node, g, values, out, cache, needs):
    x = values[0]
    axis, keep = node.attrs["axis"], node.attrs["keepdims"]
    if axis is None:
        count = x.size
        return [np.broadcast_to(g / count, x.shape).copy()]
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    if not keep:
        g = np.expand_dims(g, axes)
    return [np.broadcast_to(g / count, x.shape).copy()]


def _add_fwd(node, a, b):
    try:
        return a + b, None
    except ValueError:
        raise _shape_error(node, "operand", a.shape, b.shape) from None


def _add_bwd(node, g, values, out, cache, needs):
    a, b = values
    return [_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None]


def _mul_fwd(node, a, b):
    try:
        return a * b, None
    except ValueError:
        raise _shape_error(node, "operand", a.shape, b.shape) from None


def _mul_bwd(node, g, values, out, cache, needs):
    a, b = values
    return [_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None]


def _entropy_fwd(node, x):
    if x.shape[-1] < 2:
        raise _shape_error(node, "input", "(..., >=2)", x.shape)
    s = _softmax(x)
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - (s * z).sum(axis=-1), s


def _entropy_bwd(node, g, values, out, s, needs):
    x = values[0]
    centered = x - (s * x).sum(axis=-1, keepdims=True)
    return [-s * centered * g[..., None]]


_OPS = {
    "affine": (_affine_fwd, _affine_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "conv_transpose2d": (_conv_t_fwd, _conv_t_bwd),
    "sin": (_sin_fwd, _sin_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "softmax_cross_entropy": (_xent_fwd, _xent_bwd),
    "mse": (_mse_fwd, _mse_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "softmax_entropy": (_entropy_fwd, _entropy_bwd),
}


class Graph:
    """Append-only computation graph evaluated on numpy arrays.

    Parameters
    ----------
    dtype : numpy dtype, default float32
        Precision of every value computed in this graph.
    frozen_grads : bool, default True
        Whether backward also fills gradients for frozen parameter leaves.
    check_finite : bool, default True
        Raise :class:`NonFiniteError` as soon as an operation yields NaN/inf.
    """

    def __init__(self, dtype=np.float32, frozen_grads=True, check_finite=True):
        self.dtype = np.dtype(dtype)
        self.frozen_grads = frozen_grads
        self.check_finite = check_finite
        self.nodes = []
        self._evaluated = False
        self._bindings = {}

    # -- leaves -----------------------------------------------------------
    def _add(self, node):
        self.nodes.append(node)
        self._evaluated = False
        return node

    def input(self, shape=None, name=None, requires_grad=False):
        node = Node(len(self.nodes), "input", name=name, role="input")
        node.shape = None if shape is None else tuple(shape)
        node.requires_grad = requires_grad
        return self._add(node)

    def param(self, value, name=None, trainable=True):
        """Add a parameter leaf backed by ``value`` (not copied)."""
        node = Node(len(self.nodes), "param", name=name, role="param")
        node.source = value
        node.trainable = bool(trainable)
        node.requires_grad = node.trainable or self.frozen_grads
        return self._add(node)

    def frozen(self, value, name=None):
        return self.param(value, name=name, trainable=False)

    def constant(self, value, name=None):
        node = Node(len(self.nodes), "constant", name=name, role="constant")
        node.source = np.asarray(value, dtype=self.dtype)
        return self._add(node)

    # -- operations -------------------------------------------------------
    def _op(self, kind, inputs, name=None, **attrs):
        inputs = [self._as_node(x) for x in inputs]
        node = Node(len(self.nodes), kind, [x.id for x in inputs], attrs, name=name)
        node.requires_grad = any(x.requires_grad for x in inputs)
        return self._add(node)

    def _as_node(self, x):
        if isinstance(x, Node):
            if x.id >= len(self.nodes) or self.nodes[x.id] is not x:
                raise GraphStateError(f"node {x.name!r} belongs to another graph")
            return x
        return self.constant(x)

    def affine(self, x, w, b=None, name=None):
        """``x @ w.T + b``; ``w`` may carry leading batch axes (one map per model)."""
        inputs = [x, w] if b is None else [x, w, b]
        return self._op("affine", inputs, name=name)

    def conv2d(self, x, w, b=None, stride=1, pad=0, name=None):
        inputs = [x, w] if b is None else [x, w, b]
        return self._op("conv2d", inputs, name=name, stride=int(stride), pad=int(pad))

    def conv_transpose2d(self, x, w, b=None, stride=2, pad=1, name=None):
        """Transposed convolution; ``w`` has layout (in, out, kh, kw)."""
        inputs = [x, w] if b is None else [x, w, b]
        return self._op("conv_transpose2d", inputs, name=name, stride=int(stride), pad=int(pad))

    def sin(self, x, omega=1.0, name=None):
        return self._op("sin", [x], name=name, omega=float(omega))

    def relu(self, x, name=None):
        return self._op("relu", [x], name=name)

    def reshape(self, x, shape, name=None):
        return self._op("reshape", [x], name=name, shape=tuple(shape))

    def concat(self, xs, axis=0, name=None):
        return self._op("concat", list(xs), name=name, axis=int(axis))

    def softmax(self, x, name=None):
        return self._op("softmax", [x], name=name)

    def softmax_cross_entropy(self, logits, labels, name=None):
        labels = np.asarray(labels, dtype=np.intp)
        return self._op("softmax_cross_entropy", [logits], name=name, labels=labels)

    def mse(self, pred, target, scale=1.0, name=None):
        return self._op("mse", [pred, target], name=name, scale=float(scale))

    def mean(self, x, axis=None, keepdims=False, name=None):
        if isinstance(axis, list):
            axis = tuple(axis)
        return self._op("mean", [x], name=name, axis=axis, keepdims=keepdims)

    def add(self, a, b, name=None):
        return self._op("add", [a, b], name=name)

    def mul(self, a, b, name=None):
        return self._op("mul", [a, b], name=name)

    def softmax_entropy(self, x, name=None):
        """Shannon entropy (nats) of ``softmax(x)`` over the last axis."""
        return self._op("softmax_entropy", [x], name=name)

    # -- execution --------------------------------------------------------
    @property
    def parameters(self):
        return [n for n in self.nodes if n.role == "param"]

    def _resolve(self, key):
        if isinstance(key, Node):
            return key
        for node in self.nodes:
            if node.name == key:
                return node
        raise KeyError(key)

    def evaluate(self, bindings=None, outputs=None):
        """Run every node in order.

        Returns a dict mapping each requested output node (default: nodes no
        other node consumes) to its value.
        """
        bindings = {self._resolve(k): v for k, v in (bindings or {}).items()}
        self._bindings = bindings
        for node in self.nodes:
            if node.role == "input":
                if node not in bindings:
                    raise GraphStateError(f"input node {node.name!r} is not bound")
                value = np.asarray(bindings[node], dtype=self.dtype)
                if node.shape is not None and value.shape != node.shape:
                    raise _shape_error(node, "binding", node.shape, value.shape)
                node.value = value
            elif node.role in ("param", "constant"):
                node.value = np.asarray(node.source, dtype=self.dtype)
            else:
                forward = _OPS[node.kind][0]
                args = [self.nodes[i].value for i in node.inputs]
                out, node.cache = forward(node, *args)
                out = np.asarray(out, dtype=self.dtype)
                if self.check_finite and not _all_finite(out):
                    raise NonFiniteError(f"node {node.name!r} produced non-finite values")
                node.value = out
        self._evaluated = True
        if outputs is None:
            consumed = {i for n in self.nodes for i in n.inputs}
            outputs = [n for n in self.nodes if n.id not in consumed]
        return {n: n.value for n in (self._resolve(o) for o in outputs)}

    def backward(self, loss):
        """Gradients of scalar ``loss`` for every reachable node that needs one."""
        loss = self._resolve(loss)
        if not self._evaluated or loss.value is None:
            raise GraphStateError("backward called before evaluate")
        if loss.value.size != 1:
            raise ShapeError(f"node {loss.name!r}: loss must be scalar, got shape {loss.value.shape}")
        grads = {loss: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node)
            if g is None or node.role != "op":
                continue
            inputs = [self.nodes[i] for i in node.inputs]
            needs = [x.requires_grad for x in inputs]
            if not any(needs):
                continue
            values = [x.value for x in inputs]
            in_grads = _OPS[node.kind][1](node, g, values, node.value, node.cache, needs)
            for x, need, gx in zip(inputs, needs, in_grads):
                if not need or gx is None:
                    continue
                gx = np.asarray(gx, dtype=self.dtype)
                if x in grads:
                    grads[x] = grads[x] + gx
                else:
                    grads[x] = gx
        for node in self.nodes:
            if node.role == "param" and node.requires_grad and node not in grads:
                if node.id <= loss.id:
                    grads[node] = np.zeros_like(node.value)
        return grads

    def named_grads(self, grads, trainable_only=True):
        """Map parameter names to gradients; frozen leaves are dropped by default."""
        return {
            n.name: grads[n]
            for n in self.parameters
            if n in grads and (n.trainable or not trainable_only)
        }


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One bias-corrected Adam update applied in place to ``params``.

    ``params`` and ``grads`` are dicts keyed by parameter name. Parameters
    without a gradient are left untouched.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"parameter {name!r}: gradient shape {g.shape} != {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g, dtype=np.float64)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype, copy=False)
    return params


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params, grads):
        return adam_step(self.state, params, grads)


def check_gradients(graph, loss, step=1e-5, samples=100, seed=0, bindings=None):
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled uniformly over all parameter leaves (trainable and
    frozen) and over inputs created with ``requires_grad=True``. The graph must
    be float64.
    """
    if graph.dtype != np.float64:
        raise ValueError("gradient checks need a float64 graph")
    loss = graph._resolve(loss)
    if bindings is None:
        bindings = dict(graph._bindings)
    bindings = {graph._resolve(k): np.array(v, dtype=np.float64) for k, v in bindings.items()}

    leaves = [n for n in graph.nodes if n.role == "param" or (n.role == "input" and n.requires_grad)]
    saved = {n: (n.source, n.requires_grad) for n in graph.nodes}
    for n in leaves:
        if n.role == "param":
            n.source = np.array(n.source, dtype=np.float64)
            n.requires_grad = True
    for n in graph.nodes:
        if n.role == "op":
            n.requires_grad = any(graph.nodes[i].requires_grad for i in n.inputs)
    try:
        def arr(n):
            return n.source if n.role == "param" else bindings[n]

        def value():
            return float(graph.evaluate(bindings, outputs=[loss])[loss])

        value()
        analytic = graph.backward(loss)
        sizes = np.array([arr(n).size for n in leaves])
        total = int(sizes.sum())
        rng = np.random.default_rng(seed)
        picks = np.arange(total) if total <= samples else rng.choice(total, samples, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        worst = 0.0
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            node, idx = leaves[k], int(flat - offsets[k])
            a = arr(node).reshape(-1)
            orig = a[idx]
            a[idx] = orig + step
            up = value()
            a[idx] = orig - step
            down = value()
            a[idx] = orig
            numeric = (up - down) / (2 * step)
            exact = float(analytic[node].reshape(-1)[idx]) if node in analytic else 0.0
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
        value()
        return worst
    finally:
        for n, (src, req) in saved.items():
            n.source, n.requires_grad = src, req
