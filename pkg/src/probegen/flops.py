"""Analytic FLOPs accounting for probing pipelines.

Convention: one multiply-accumulate counts as 2 FLOPs; bias additions,
activations, pooling and the loss are not counted. A backward pass is
counted as twice the forward pass, so one training step costs 3x forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError
from .probes import conv_plan, fc_plan

CONVENTION = ("1 multiply-accumulate = 2 FLOPs; biases, activations, pooling and loss "
              "not counted; backward = 2 x forward")


def affine_flops(batch, n_in, n_out):
    return 2 * batch * n_in * n_out


def conv_flops(batch, c_in, c_out, h_out, w_out, kernel):
    return 2 * batch * c_out * h_out * w_out * c_in * kernel * kernel


def conv_transpose_flops(batch, c_in, c_out, h_in, w_in, kernel):
    """Every input pixel scatters a (c_out, k, k) stamp per input channel."""
    return 2 * batch * c_in * h_in * w_in * c_out * kernel * kernel


@dataclass
class FlopsReport:
    rows: list = field(default_factory=list)  # (component, layer, kind, forward FLOPs)
    n_probes: int = 0
    batch: int = 0

    def add(self, component, layer, kind, flops):
        self.rows.append((component, layer, kind, int(flops)))

    def term(self, component):
        return sum(r[3] for r in self.rows if r[0] == component)

    @property
    def forward(self):
        return {c: self.term(c) for c in ("generator", "model", "head")}

    @property
    def forward_total(self):
        return sum(self.forward.values())

    @property
    def backward_total(self):
        return 2 * self.forward_total

    @property
    def train_step(self):
        return self.forward_total + self.backward_total

    def to_dict(self):
        return {
            "convention": CONVENTION,
            "n_probes": self.n_probes,
            "batch": self.batch,
            "forward": self.forward,
            "forward_total": self.forward_total,
            "backward_total": self.backward_total,
            "train_step": self.train_step,
            "inference_per_batch": self.forward_total,
            "layers": [{"component": c, "layer": l, "kind": k, "forward_flops": f} for c, l, k, f in self.rows],
        }

    def table(self):
        lines = [f"{'component':<10} {'layer':<12} {'kind':<16} {'forward FLOPs':>16}"]
        for c, l, k, f in self.rows:
            lines.append(f"{c:<10} {l:<12} {k:<16} {f:>16,d}")
        lines.append(f"forward total {self.forward_total:,d}; train step {self.train_step:,d}")
        lines.append(f"({CONVENTION})")
        return "\n".join(lines)


def _generator_rows(report, config, k):
    if config is None or config.kind == "identity":
        return
    if config.kind.startswith("fc"):
        dims = fc_plan(config)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            report.add("generator", f"gen.fc{i}", "affine", affine_flops(k, a, b))
        return
    seed_shape, stages = conv_plan(config)
    report.add("generator", "gen.seed", "affine", affine_flops(k, config.latent_dim, int(np.prod(seed_shape))))
    for i, st in enumerate(stages):
        report.add("generator", f"gen.up{i}", "conv-transpose",
                   conv_transpose_flops(k, st.in_channels, st.out_channels, st.size_in, st.size_in, st.kernel))


def _model_rows(report, spec, n):
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.layer_shapes[1:])):
        if layer.kind == "affine":
            report.add("model", f"layer{i}", "affine", affine_flops(n, layer.in_dim, layer.out_dim))
        elif layer.kind == "conv":
            if len(out_shape) != 3:
                raise ShapeError(f"layer {i}: unresolved conv output shape {out_shape}")
            c_out, h, w = out_shape
            report.add("model", f"layer{i}", "conv", conv_flops(n, layer.in_dim, c_out, h, w, layer.kernel))


def flops_report(spec, generator=None, n_probes=128, batch=64, head_depth=6, head_hidden=256,
                 n_outputs=10, head_in=None):
    """Forward FLOPs split into generator, probed-model and head terms.

    ``spec`` is the probed models' architecture, ``generator`` a
    GeneratorConfig (None or identity for fixed/vanilla probes). The
    generator runs once per step; every model of the batch runs on all
    ``n_probes`` probes.
    """
    report = FlopsReport(n_probes=n_probes, batch=batch)
    _generator_rows(report, generator, n_probes)
    if n_probes:
        _model_rows(report, spec, batch * n_probes)
    if head_in is None:
        head_in = n_probes * int(np.prod(spec.output_shape))
    dims = [head_in] + [head_hidden] * (head_depth - 1) + [n_outputs]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        report.add("head", f"head.{i}", "affine", affine_flops(batch, a, b))
    return report
