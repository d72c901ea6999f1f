"""Training/evaluation harness: experiment configs, metric reports,
pipeline checkpoints and ablation sweeps."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import (
    FIXED_FEATURE_METHODS, METHODS, ProbingClassifier, ProbingRegressor, default_generator_config,
)
from .exceptions import ConfigError, DataFormatError, NonFiniteError, ProbeGenError
from .flops import flops_report
from .metrics import generalization_gap
from .models import ArchitectureSpec
from .zoo import WEIGHT_MAGIC, WEIGHT_VERSION, load_zoo

log = logging.getLogger(__name__)

DEFAULTS = {
    "zoo": None,
    "method": "probegen",
    "n_probes": 64,
    "generator": {"kind": None, "depth": None, "latent_dim": 32, "width_multiplier": 16, "hidden": 32,
                  "latent_scale": 1.0},
    "head": {"depth": 6, "hidden": 256},
    "learning_rate": 3e-4,
    "batch_size": 32,
    "epochs": 30,
    "seed": 0,
    "precision": "float32",
    "standardize": False,
}


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """Resolved experiment settings; build with :meth:`from_dict`."""

    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data=None, **overrides):
        values = _merge(DEFAULTS, data or {})
        values = _merge(DEFAULTS, {**values, **overrides})
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def replace(self, **changes):
        data = copy.deepcopy(self.values)
        for key, value in changes.items():
            parts = key.split(".")
            node = data
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(data)

    def validate(self):
        v = self.values
        if v["method"] not in METHODS:
            raise ConfigError(f"unknown method {v['method']!r}; choose from {METHODS}")
        k = v["n_probes"]
        if not isinstance(k, int) or k < 0:
            raise ConfigError("n_probes must be a non-negative integer")
        if v["method"] == "statnn" and k > 0:
            raise ConfigError("statnn uses no probes; set n_probes to 0")
        if v["method"] != "statnn" and k < 1:
            raise ConfigError(f"method {v['method']!r} needs n_probes >= 1")
        if v["method"] in FIXED_FEATURE_METHODS + ("vanilla",) and v["generator"]["kind"] not in (None, "identity"):
            raise ConfigError(f"method {v['method']!r} does not use a trainable generator")
        if v["standardize"] and v["method"] not in FIXED_FEATURE_METHODS:
            raise ConfigError("standardize is only available for fixed-feature methods")
        for key in ("epochs", "batch_size"):
            if not isinstance(v[key], int) or v[key] < (0 if key == "epochs" else 1):
                raise ConfigError(f"{key} must be a {'non-negative' if key == 'epochs' else 'positive'} integer")
        if not (isinstance(v["learning_rate"], (int, float)) and v["learning_rate"] > 0):
            raise ConfigError("learning_rate must be positive")
        if v["precision"] not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        return self

    def estimator_params(self):
        v = self.values
        g, h = v["generator"], v["head"]
        return {
            "method": v["method"], "n_probes": v["n_probes"],
            "generator_kind": g["kind"], "generator_depth": g["depth"], "latent_dim": g["latent_dim"],
            "width_multiplier": g["width_multiplier"], "generator_hidden": g["hidden"],
            "latent_scale": float(g["latent_scale"]),
            "head_depth": h["depth"], "head_hidden": h["hidden"],
            "learning_rate": float(v["learning_rate"]), "batch_size": v["batch_size"], "epochs": v["epochs"],
            "standardize": v["standardize"], "precision": v["precision"], "random_state": v["seed"],
        }

    def to_dict(self):
        return copy.deepcopy(self.values)


def make_estimator(config, task):
    cls = ProbingClassifier if task == "class-prediction" else ProbingRegressor
    return cls(**config.estimator_params())


@dataclass
class MetricReport:
    config: dict
    task: str
    metric: str
    history: list
    train_metric: float
    val_metric: float | None
    test_metric: float
    gap: float
    flops: dict
    seed: int
    threads: int | None = None
    wall_clock: float = 0.0
    notes: list = field(default_factory=list)

    def check_finite(self):
        values = [self.train_metric, self.test_metric, self.gap]
        values += [v for row in self.history for k, v in row.items() if k != "epoch"]
        if self.val_metric is not None:
            values.append(self.val_metric)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("report contains non-finite values")
        return self

    def to_dict(self):
        return {
            "task": self.task, "metric": self.metric, "seed": self.seed, "threads": self.threads,
            "train_metric": self.train_metric, "val_metric": self.val_metric,
            "test_metric": self.test_metric, "generalization_gap": self.gap,
            "history": self.history, "flops": self.flops, "wall_clock_seconds": self.wall_clock,
            "notes": self.notes, "config": self.config,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def csv_text(self):
        """Per-epoch series plus final rows; no timing, so reruns are byte-identical."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", self.metric])
        for row in self.history:
            w.writerow([row["epoch"], "train", repr(row["train_loss"]), ""])
            if "val_loss" in row:
                w.writerow([row["epoch"], "val", repr(row["val_loss"]), repr(row["val_metric"])])
        w.writerow(["final", "train", "", repr(self.train_metric)])
        if self.val_metric is not None:
            w.writerow(["final", "val", "", repr(self.val_metric)])
        w.writerow(["final", "test", "", repr(self.test_metric)])
        w.writerow(["final", "gap", "", repr(self.gap)])
        return buf.getvalue()

    def to_csv(self, path):
        Path(path).write_text(self.csv_text())


def pipeline_flops(config, spec, n_outputs, n_probes=None, batch=None):
    est = make_estimator(config, "class-prediction")
    k = config.n_probes if n_probes is None else n_probes
    gen = None
    if config.method in ("probegen", "entropy-only"):
        gen = default_generator_config(spec.input_shape, est.generator_kind, est.generator_depth,
                                       est.latent_dim, est.width_multiplier, est.generator_hidden)
    head_in = None
    if config.method == "entropy-only":
        head_in = k
    elif config.method == "statnn":
        head_in = 14 * len(spec.weighted_layers)
    return flops_report(spec, gen, k, batch or config.batch_size, config.head["depth"], config.head["hidden"],
                        n_outputs, head_in)


def train_pipeline(config, zoo=None, threads=None):
    """Fit on the train split, report per-epoch validation and final test metrics.

    Returns (fitted estimator, MetricReport).
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    config.validate()
    if zoo is None:
        if not config.zoo:
            raise ConfigError("no zoo given")
        zoo = load_zoo(config.zoo)
    for name in ("train", "test"):
        if not zoo.splits.get(name):
            raise DataFormatError(f"zoo has no {name!r} split")
    X_train, y_train = zoo.split("train")
    X_val, y_val = zoo.split("val")
    X_test, y_test = zoo.split("test")
    est = make_estimator(config, zoo.task)
    start = time.perf_counter()
    eval_set = (X_val, y_val) if len(X_val) else None
    est.fit(X_train, y_train, eval_set=eval_set)
    elapsed = time.perf_counter() - start
    metric = "accuracy" if zoo.task == "class-prediction" else "kendall_tau"
    train_m = float(est.score(X_train, y_train))
    test_m = float(est.score(X_test, y_test))
    val_m = float(est.score(X_val, y_val)) if eval_set else None
    spec = X_train[0].spec
    flops = pipeline_flops(config, spec, est.n_outputs_).to_dict()
    notes = []
    if config.method == "statnn":
        notes.append("statnn features feed an MLP head instead of gradient-boosted trees")
    report = MetricReport(
        config=config.to_dict(), task=zoo.task, metric=metric, history=est.history_,
        train_metric=train_m, val_metric=val_m, test_metric=test_m,
        gap=generalization_gap((train_m, metric), (test_m, metric)), flops=flops,
        seed=config.seed, threads=threads, wall_clock=elapsed, notes=notes,
    )
    return est, report.check_finite()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(estimator, path, spec):
    """Write ``<path>.pgzw`` (float32 LE arrays) and ``<path>.json`` (layout)."""
    path = Path(path)
    state = estimator.get_state()
    names = sorted(state)
    payload = b"".join(np.asarray(state[n], dtype="<f4").tobytes() for n in names)
    path.with_suffix(".pgzw").write_bytes(WEIGHT_MAGIC + bytes([WEIGHT_VERSION]) + payload)
    meta = {
        "estimator": type(estimator).__name__,
        "params": estimator.get_params(),
        "arrays": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
        "spec": spec.to_dict(),
        "n_outputs": int(estimator.n_outputs_),
        "classes": [c.item() for c in getattr(estimator, "classes_", [])],
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        data = path.with_suffix(".pgzw").read_bytes()
    except FileNotFoundError as exc:
        raise DataFormatError(f"missing checkpoint file: {exc.filename}") from None
    if data[:4] != WEIGHT_MAGIC or len(data) < 5 or data[4] != WEIGHT_VERSION:
        raise DataFormatError(f"{path}: not a checkpoint file")
    flat = np.frombuffer(data, dtype="<f4", offset=5)
    state, pos = {}, 0
    for entry in meta["arrays"]:
        size = int(np.prod(entry["shape"]))
        if pos + size > flat.size:
            raise DataFormatError(f"{path}: checkpoint truncated")
        state[entry["name"]] = flat[pos:pos + size].reshape(entry["shape"])
        pos += size
    if pos != flat.size:
        raise DataFormatError(f"{path}: trailing data in checkpoint")
    cls = ProbingClassifier if meta["estimator"] == "ProbingClassifier" else ProbingRegressor
    est = cls(**meta["params"])
    spec = ArchitectureSpec.from_dict(meta["spec"])
    head_in = state["head.0.w"].shape[1]
    est.set_state(state, spec.input_shape, spec.output_shape, meta["n_outputs"], head_in)
    if meta["classes"]:
        est.classes_ = np.array(meta["classes"])
    return est, spec


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

AXES = {
    "probe-count": ("n_probes", (16, 32, 64, 128)),
    "generator-depth": ("generator.depth", (1, 2, 3, 4, 5)),
    "generator-kind": ("generator.kind", ("conv-linear", "fc-linear", "conv-nonlinear")),
}


@dataclass
class AblationCell:
    axis_value: object
    seed: int
    status: str
    metric: float | None = None
    gap: float | None = None
    flops: int | None = None
    error: str = ""
    label: str = ""


@dataclass
class AblationResult:
    axis: str
    metric: str
    cells: list

    def summary(self):
        """Mean and (population) std per axis value over successful seeds."""
        out = []
        for value in dict.fromkeys(c.label or str(c.axis_value) for c in self.cells):
            ok = [c for c in self.cells if (c.label or str(c.axis_value)) == value and c.status == "ok"]
            m = np.array([c.metric for c in ok])
            gp = np.array([c.gap for c in ok])
            out.append({
                "value": value, "n": len(ok),
                "metric_mean": float(m.mean()) if len(ok) else None,
                "metric_std": float(m.std()) if len(ok) else None,
                "gap_mean": float(gp.mean()) if len(ok) else None,
                "gap_std": float(gp.std()) if len(ok) else None,
            })
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([self.axis, "seed", self.metric, "gap", "flops", "status"])
            for c in self.cells:
                w.writerow([c.label or c.axis_value, c.seed, "" if c.metric is None else repr(c.metric),
                            "" if c.gap is None else repr(c.gap), "" if c.flops is None else c.flops,
                            c.status if not c.error else f"{c.status}: {c.error}"])

    def summary_csv(self, path):
        rows = self.summary()
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([self.axis, "n", f"{self.metric}_mean", f"{self.metric}_std", "gap_mean", "gap_std"])
            for r in rows:
                w.writerow([r["value"], r["n"], r["metric_mean"], r["metric_std"], r["gap_mean"], r["gap_std"]])


def ablation_grid(base, axis, values=None, kinds=None):
    """(label, config) pairs for one sweep.

    On the generator-depth axis ``kinds`` sweeps several generator kinds at
    once; depth-1 cells are linear for every kind and are emitted only once.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {tuple(AXES)}")
    key, default = AXES[axis]
    values = tuple(values) if values is not None else default
    cells = []
    if axis == "generator-depth":
        kinds = tuple(kinds) if kinds else (base.generator["kind"],)
        collapsed = False
        for depth in values:
            if depth < 1:
                raise ConfigError("generator depth must be >= 1")
            if depth < 2:
                if collapsed:
                    continue
                collapsed = True
                label = f"{depth}" if len(kinds) == 1 else f"{depth} (all kinds)"
                cells.append((label, depth, base.replace(**{key: depth, "generator.kind": kinds[0]})))
                continue
            for kind in kinds:
                label = f"{depth}" if len(kinds) == 1 else f"{kind}:{depth}"
                cells.append((label, depth, base.replace(**{key: depth, "generator.kind": kind})))
        return cells
    for value in values:
        cells.append((str(value), value, base.replace(**{key: value})))
    return cells


def run_ablation_suite(base, axis, values=None, seeds=(0, 1, 2), zoo=None, kinds=None):
    """Train every (axis value, seed) cell sequentially; failed cells are marked, not fatal."""
    if isinstance(base, dict):
        base = ExperimentConfig.from_dict(base)
    if zoo is None:
        zoo = load_zoo(base.zoo)
    metric = "accuracy" if zoo.task == "class-prediction" else "kendall_tau"
    cells = []
    for label, value, cfg in ablation_grid(base, axis, values, kinds):
        for seed in seeds:
            try:
                _, report = train_pipeline(cfg.replace(seed=seed), zoo)
            except (ProbeGenError, ValueError) as exc:
                log.warning("cell %s seed %d failed: %s", label, seed, exc)
                cells.append(AblationCell(value, seed, "failed", error=str(exc).replace("\n", " "), label=label))
                continue
            cells.append(AblationCell(value, seed, "ok", report.test_metric, report.gap,
                                      report.flops["train_step"], label=label))
    return AblationResult(axis, metric, cells)
