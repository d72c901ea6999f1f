"""Frozen networks under analysis: architecture specs, weights, forward passes.

Two families are supported out of the box: sine-activated coordinate networks
(INRs, 2-D coordinate in, scalar intensity out) and small ReLU CNN classifiers.
Weights are stored as read-only float32 arrays, so a :class:`ProbedModel` is
immutable once built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .exceptions import ConfigError, ShapeError

ACTIVATIONS = ("sine", "relu", "none")
LAYER_KINDS = ("affine", "conv", "gap", "flatten")


@dataclass(frozen=True)
class Layer:
    """One layer descriptor.

    For ``affine`` layers ``in_dim``/``out_dim`` are feature counts, for
    ``conv`` layers they are channel counts. ``omega`` multiplies the
    pre-activation of sine layers.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    activation: str = "none"
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    omega: float = 1.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def has_weights(self):
        return self.kind in ("affine", "conv")

    def weight_shapes(self):
        if self.kind == "affine":
            return (self.out_dim, self.in_dim), (self.out_dim,)
        if self.kind == "conv":
            return (self.out_dim, self.in_dim, self.kernel, self.kernel), (self.out_dim,)
        return None

    def to_dict(self):
        d = {"kind": self.kind}
        if self.has_weights:
            d.update(in_dim=self.in_dim, out_dim=self.out_dim, activation=self.activation)
        if self.kind == "conv":
            d.update(kernel=self.kernel, stride=self.stride, pad=self.pad)
        if self.activation == "sine":
            d["omega"] = self.omega
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _propagate(layer, shape):
    if layer.kind == "affine":
        if shape != (layer.in_dim,):
            raise ShapeError(f"affine layer expects input ({layer.in_dim},), got {shape}")
        return (layer.out_dim,)
    if layer.kind == "conv":
        if len(shape) != 3 or shape[0] != layer.in_dim:
            raise ShapeError(f"conv layer expects ({layer.in_dim}, H, W), got {shape}")
        c, h, w = shape
        ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv layer produces empty output from {shape}")
        return (layer.out_dim, ho, wo)
    if len(shape) != 3:
        raise ShapeError(f"{layer.kind} layer expects (C, H, W), got {shape}")
    if layer.kind == "gap":
        return (shape[0],)
    return (int(np.prod(shape)),)


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(_propagate(layer, shapes[-1]))
        object.__setattr__(self, "_shapes", tuple(shapes))
        weighted = [l for l in self.layers if l.has_weights]
        if weighted:
            if not self.layers[-1].has_weights:
                raise ConfigError("the output layer must be an affine or conv layer")
            if self.layers[-1].activation != "none":
                raise ConfigError("the output layer must have activation 'none'")

    @property
    def output_shape(self):
        return self._shapes[-1]

    @property
    def layer_shapes(self):
        """Input shape followed by the output shape of every layer."""
        return self._shapes

    @property
    def weighted_layers(self):
        return [l for l in self.layers if l.has_weights]

    @property
    def is_affine_only(self):
        return all(l.kind == "affine" for l in self.layers)

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Layer.from_dict(l) for l in d["layers"]), tuple(d["input_shape"]))


def inr_spec(hidden=32, depth=3, omega=30.0):
    """Coordinate network 2 -> hidden x depth (sine) -> 1."""
    layers = [Layer("affine", 2, hidden, "sine", omega=omega)]
    layers += [Layer("affine", hidden, hidden, "sine") for _ in range(depth - 1)]
    layers.append(Layer("affine", hidden, 1, "none"))
    return ArchitectureSpec(tuple(layers), (2,))


def cnn_spec(channels, in_channels=1, image_size=8, n_classes=10):
    """ReLU conv stack (k3, s1, p1) + global average pool + affine logits."""
    layers, c = [], in_channels
    for width in channels:
        layers.append(Layer("conv", c, int(width), "relu", kernel=3, stride=1, pad=1))
        c = int(width)
    layers += [Layer("gap"), Layer("affine", c, n_classes, "none")]
    return ArchitectureSpec(tuple(layers), (in_channels, image_size, image_size))


@dataclass(frozen=True)
class ProbedModel:
    """A frozen network: architecture, per-layer (weight, bias) and an id."""

    spec: ArchitectureSpec
    weights: tuple
    identifier: str = "model"

    def __post_init__(self):
        expected = [l.weight_shapes() for l in self.spec.weighted_layers]
        if len(expected) != len(self.weights):
            raise ShapeError(
                f"{self.identifier}: spec has {len(expected)} weighted layers, "
                f"got {len(self.weights)} weight pairs"
            )
        frozen = []
        for i, ((ws, bs), (w, b)) in enumerate(zip(expected, self.weights)):
            w = np.array(w, dtype=np.float32)
            b = np.array(b, dtype=np.float32)
            if w.shape != ws or b.shape != bs:
                raise ShapeError(
                    f"{self.identifier}: layer {i} expects weight {ws} / bias {bs}, "
                    f"got {w.shape} / {b.shape}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"{self.identifier}: layer {i} has non-finite weights")
            w.setflags(write=False)
            b.setflags(write=False)
            frozen.append((w, b))
        object.__setattr__(self, "weights", tuple(frozen))


def init_weights(spec, rng, scale=1.0):
    """Random weights: SIREN-style for sine layers, He-uniform for ReLU layers."""
    weights = []
    for layer in spec.weighted_layers:
        ws, bs = layer.weight_shapes()
        fan_in = int(np.prod(ws[1:]))
        if layer.activation == "sine":
            bound = 1.0 / fan_in if layer.omega != 1.0 else np.sqrt(6.0 / fan_in)
        elif layer.activation == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=ws) * scale
        b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=bs)
        weights.append((w.astype(np.float32), b.astype(np.float32)))
    return tuple(weights)


def build_forward(g, spec, weight_nodes, x):
    """Append the forward pass of ``spec`` to graph ``g``.

    ``weight_nodes`` is a list of (weight, bias) nodes. For affine-only specs
    the nodes may be stacked along a leading model axis, in which case ``x``
    of shape (k, in) produces (models, k, out).
    """
    pairs = iter(weight_nodes)
    for i, layer in enumerate(spec.layers):
        if layer.kind == "affine":
            w, b = next(pairs)
            x = g.affine(x, w, b, name=f"layer{i}.affine")
        elif layer.kind == "conv":
            w, b = next(pairs)
            x = g.conv2d(x, w, b, stride=layer.stride, pad=layer.pad, name=f"layer{i}.conv")
        elif layer.kind == "gap":
            x = g.mean(x, axis=(2, 3), name=f"layer{i}.gap")
        else:
            x = g.reshape(x, (-1, int(np.prod(spec.layer_shapes[i]))), name=f"layer{i}.flatten")
        if layer.activation == "sine":
            x = g.sin(x, omega=layer.omega)
        elif layer.activation == "relu":
            x = g.relu(x)
    return x


def model_forward(model, inputs, dtype=np.float32):
    """Evaluate a model on a batch of inputs shaped ``(n, *spec.input_shape)``."""
    inputs = np.asarray(inputs)
    spec = model.spec
    if inputs.shape[1:] != spec.input_shape:
        raise ShapeError(
            f"{model.identifier}: input batch expects (n, {', '.join(map(str, spec.input_shape))}), "
            f"got {inputs.shape}"
        )
    g = Graph(dtype, frozen_grads=False)
    x = g.input(name="x")
    nodes = [(g.frozen(w, name=f"w{i}"), g.frozen(b, name=f"b{i}")) for i, (w, b) in enumerate(model.weights)]
    out = build_forward(g, spec, nodes, x)
    return g.evaluate({x: inputs}, outputs=[out])[out]


def permute_hidden_neurons(model, layer_index, permutation):
    """Reorder the units of weighted layer ``layer_index``; function unchanged."""
    weighted = [i for i, l in enumerate(model.spec.layers) if l.has_weights]
    if not 0 <= layer_index < len(weighted) - 1:
        raise ValueError(f"layer {layer_index} is not a hidden weighted layer")
    perm = np.asarray(permutation)
    layer = model.spec.layers[weighted[layer_index]]
    if perm.shape != (layer.out_dim,) or not np.array_equal(np.sort(perm), np.arange(layer.out_dim)):
        raise ValueError(
            f"permutation must be a bijection on {layer.out_dim} units, got length {perm.size}"
        )
    weights = list(model.weights)
    w, b = weights[layer_index]
    weights[layer_index] = (w[perm], b[perm])

    # columns of the next weighted layer; a flatten in between permutes whole blocks
    nxt = weighted[layer_index + 1]
    between = model.spec.layers[weighted[layer_index] + 1:nxt]
    cols = perm
    if any(l.kind == "flatten" for l in between):
        pos = weighted[layer_index] + 1 + [l.kind for l in between].index("flatten")
        block = int(np.prod(model.spec.layer_shapes[pos][1:]))
        cols = (perm[:, None] * block + np.arange(block)).reshape(-1)
    w2, b2 = weights[layer_index + 1]
    weights[layer_index + 1] = (w2[:, cols], b2)
    return ProbedModel(model.spec, tuple(weights), model.identifier)


def count_parameters(model_or_spec):
    spec = getattr(model_or_spec, "spec", model_or_spec)
    total = 0
    for layer in spec.weighted_layers:
        ws, bs = layer.weight_shapes()
        total += int(np.prod(ws)) + int(np.prod(bs))
    return total


def flatten_weights(model):
    """All weights then biases, layer by layer, as one float32 vector."""
    parts = []
    for w, b in model.weights:
        parts += [w.reshape(-1), b.reshape(-1)]
    if not parts:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(parts)


def unflatten_weights(spec, flat):
    flat = np.asarray(flat, dtype=np.float32)
    weights, pos = [], 0
    for layer in spec.weighted_layers:
        ws, bs = layer.weight_shapes()
        nw, nb = int(np.prod(ws)), int(np.prod(bs))
        if pos + nw + nb > flat.size:
            raise ShapeError(f"weight vector too short for spec ({flat.size} values)")
        weights.append((flat[pos:pos + nw].reshape(ws), flat[pos + nw:pos + nw + nb].reshape(bs)))
        pos += nw + nb
    if pos != flat.size:
        raise ShapeError(f"weight vector has {flat.size} values, spec needs {pos}")
    return tuple(weights)
