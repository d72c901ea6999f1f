"""Model representations (probe responses, weight statistics, probe entropies)
and the MLP head that maps them to the target attribute."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .exceptions import ContractError, ShapeError
from .models import build_forward

LAYOUTS = ("probe-concat", "stat-features", "entropy-features")
STAT_NAMES = ("mean", "var", "p0", "p25", "p50", "p75", "p100")


@dataclass
class Representation:
    features: np.ndarray  # (batch, D)
    layout: str
    n_probes: int = 0
    per_probe: int = 0

    def __post_init__(self):
        self.features = np.atleast_2d(self.features)
        if self.layout not in LAYOUTS:
            raise ContractError(f"unknown layout {self.layout!r}")
        if self.layout == "probe-concat" and self.features.shape[1] != self.n_probes * self.per_probe:
            raise ShapeError(
                f"probe-concat layout needs {self.n_probes}x{self.per_probe} features, "
                f"got {self.features.shape[1]}"
            )

    def column_names(self):
        if self.layout == "probe-concat":
            return [f"p{i}_o{j}" for i in range(self.n_probes) for j in range(self.per_probe)]
        if self.layout == "entropy-features":
            return [f"H{i}" for i in range(self.n_probes)]
        n_layers = self.features.shape[1] // 14
        return [f"l{l}_{part}_{s}" for l in range(n_layers) for part in ("w", "b") for s in STAT_NAMES]

    def to_csv(self, path, identifiers=None, labels=None):
        """One row per model; the header encodes the layout."""
        n = len(self.features)
        ids = identifiers if identifiers is not None else [str(i) for i in range(n)]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            f.write(f"# layout={self.layout} n_probes={self.n_probes} per_probe={self.per_probe}\n")
            head = ["identifier"] + (["label"] if labels is not None else []) + self.column_names()
            writer.writerow(head)
            for i in range(n):
                row = [ids[i]] + ([labels[i]] if labels is not None else [])
                writer.writerow(row + [repr(float(v)) for v in self.features[i]])


def can_stack(models):
    """True when all models share one affine-only spec (weights can be batched)."""
    spec = models[0].spec
    return spec.is_affine_only and all(m.spec == spec for m in models)


def stack_weights(models):
    """Per-layer (W, b) arrays with a leading model axis."""
    n_layers = len(models[0].weights)
    return [
        (np.stack([m.weights[l][0] for m in models]), np.stack([m.weights[l][1] for m in models]))
        for l in range(n_layers)
    ]


def build_probe_features(g, models, probes, stacked=None):
    """Append ``[f(p_1) ... f(p_k)]`` for every model to ``g``.

    Returns a (len(models), k * out_dim) node. Model weights enter as frozen
    leaves, so gradients reach the probes but never the models. ``stacked``
    optionally supplies precomputed :func:`stack_weights` output.
    """
    spec = models[0].spec
    n = len(models)
    out_dim = int(np.prod(spec.output_shape))
    if stacked is not None or can_stack(models):
        stacked = stacked if stacked is not None else stack_weights(models)
        nodes = [(g.frozen(w, name=f"zoo.w{l}"), g.frozen(b, name=f"zoo.b{l}"))
                 for l, (w, b) in enumerate(stacked)]
        out = build_forward(g, spec, nodes, probes)  # (n, k, out)
        return g.reshape(out, (n, -1), name="features")
    rows = []
    for i, m in enumerate(models):
        nodes = [(g.frozen(w, name=f"m{i}.w{l}"), g.frozen(b, name=f"m{i}.b{l}"))
                 for l, (w, b) in enumerate(m.weights)]
        out = build_forward(g, m.spec, nodes, probes)  # (k, out)
        rows.append(g.reshape(out, (1, -1)))
    return rows[0] if n == 1 else g.concat(rows, axis=0, name="features")


def _as_probe_array(probes):
    return np.asarray(getattr(probes, "probes", probes))


def probe_representation(model, probes, dtype=np.float32):
    """Responses of one model to k probes, concatenated in probe order."""
    return probe_representation_batch([model], probes, dtype)


def probe_representation_batch(models, probes, dtype=np.float32, chunk=256):
    probes = _as_probe_array(probes)
    spec = models[0].spec
    if probes.shape[1:] != spec.input_shape:
        raise ShapeError(f"probes {probes.shape[1:]} do not match model input {spec.input_shape}")
    feats = []
    for start in range(0, len(models), chunk):
        batch = models[start:start + chunk]
        g = Graph(dtype, frozen_grads=False)
        out = build_probe_features(g, batch, g.constant(probes))
        feats.append(g.evaluate(outputs=[out])[out])
    out_dim = int(np.prod(spec.output_shape))
    return Representation(np.concatenate(feats), "probe-concat", len(probes), out_dim)


def _stats(values):
    # sorted first so the result depends only on the multiset of values
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("cannot compute statistics of an empty layer")
    return [v.mean(), v.var(), *np.percentile(v, [0, 25, 50, 75, 100])]


def statnn_vector(model):
    feats = []
    for i, (w, b) in enumerate(model.weights):
        if w.size == 0 or b.size == 0:
            raise ValueError(f"{model.identifier}: layer {i} is empty")
        feats += _stats(w) + _stats(b)
    return np.array(feats)


def statnn_features(models):
    """Mean, variance and 0/25/50/75/100th percentiles of each layer's
    flattened weights and biases (14 values per layer)."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    return Representation(np.stack([statnn_vector(m) for m in models]), "stat-features")


def entropy_features(representation):
    """Shannon entropy (nats) of the softmax over each probe's outputs."""
    if representation.layout != "probe-concat":
        raise ContractError(f"entropy features need a probe-concat layout, got {representation.layout!r}")
    if representation.per_probe < 2:
        raise ContractError("entropy features need at least 2 outputs per probe")
    x = representation.features.reshape(len(representation.features), representation.n_probes, -1)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    ent = np.log(e.sum(axis=-1)) - (s * z).sum(axis=-1)
    return Representation(ent, "entropy-features", representation.n_probes, 1)


class MLPHead:
    """ReLU MLP ``C``: ``depth`` affine layers, the last one linear."""

    def __init__(self, in_dim, out_dim, depth=6, hidden=256, rng=None, params=None):
        self.in_dim, self.out_dim, self.depth, self.hidden = in_dim, out_dim, depth, hidden
        if params is None:
            rng = np.random.default_rng(rng)
            params = {}
            dims = self.dims
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                bound = 1.0 / np.sqrt(a)
                params[f"head.{i}.w"] = rng.uniform(-bound, bound, (b, a)).astype(np.float32)
                params[f"head.{i}.b"] = rng.uniform(-bound, bound, (b,)).astype(np.float32)
        self.params = params

    @property
    def dims(self):
        return [self.in_dim] + [self.hidden] * (self.depth - 1) + [self.out_dim]

    def build(self, g, x, trainable=True):
        for i in range(self.depth):
            w = g.param(self.params[f"head.{i}.w"], name=f"head.{i}.w", trainable=trainable)
            b = g.param(self.params[f"head.{i}.b"], name=f"head.{i}.b", trainable=trainable)
            x = g.affine(x, w, b, name=f"head.{i}")
            if i < self.depth - 1:
                x = g.relu(x)
        return x


def head_predict(head, representation, dtype=np.float32):
    feats = getattr(representation, "features", representation)
    feats = np.atleast_2d(np.asarray(feats))
    if feats.shape[1] != head.in_dim:
        raise ShapeError(f"head expects {head.in_dim} features, got {feats.shape[1]}")
    g = Graph(dtype, frozen_grads=False)
    out = head.build(g, g.constant(feats), trainable=False)
    return g.evaluate(outputs=[out])[out]
