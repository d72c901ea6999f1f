"""Model zoos: generation (INR per image, CNN per hyperparameter draw),
serialization and loading.

On disk a zoo is a directory holding ``manifest.json`` and one ``.pgzw``
weight file per model::

    b"PGZW" | version byte | float32 LE weights then biases, layer order

The manifest stores a CRC32 for every weight file, so a flipped byte is
reported on load.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, Graph
from .datasets import ImageDataset
from .exceptions import (
    ChecksumError, ConfigError, DataFormatError, NonFiniteError, VersionError,
)
from .models import (
    ArchitectureSpec, ProbedModel, build_forward, cnn_spec, flatten_weights,
    init_weights, inr_spec, model_forward, unflatten_weights,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"
WEIGHT_MAGIC = b"PGZW"
WEIGHT_VERSION = 1
TASKS = ("class-prediction", "accuracy-regression")
SPLITS = ("train", "val", "test")


@dataclass
class ZooRecord:
    model: ProbedModel
    label: float | int
    info: dict = field(default_factory=dict)

    @property
    def identifier(self):
        return self.model.identifier


@dataclass
class ModelZoo:
    task: str
    family: str
    seed: int
    records: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataFormatError(f"unknown task kind {self.task!r}")

    def __len__(self):
        return len(self.records)

    @property
    def identifiers(self):
        return [r.identifier for r in self.records]

    @property
    def n_classes(self):
        if self.task != "class-prediction":
            return None
        return int(self.meta.get("n_classes", max((int(r.label) for r in self.records), default=-1) + 1))

    def get(self, identifier):
        for r in self.records:
            if r.identifier == identifier:
                return r
        raise KeyError(identifier)

    def split(self, name):
        """Models and labels of one split, in stored order."""
        ids = set(self.splits.get(name, []))
        recs = [r for r in self.records if r.identifier in ids]
        models = [r.model for r in recs]
        dtype = np.int64 if self.task == "class-prediction" else np.float64
        return models, np.array([r.label for r in recs], dtype=dtype)

    def assign_splits(self, fractions=(0.7, 0.15, 0.15), seed=None):
        rng = np.random.default_rng(self.seed if seed is None else seed)
        ids = self.identifiers
        order = rng.permutation(len(ids))
        n_train = int(round(fractions[0] * len(ids)))
        n_val = int(round(fractions[1] * len(ids)))
        cuts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
                "test": order[n_train + n_val:]}
        self.splits = {k: [ids[i] for i in sorted(v)] for k, v in cuts.items()}
        return self

    def manifest(self):
        return {
            "format_version": FORMAT_VERSION,
            "task": self.task,
            "family": self.family,
            "seed": self.seed,
            "meta": self.meta,
            "splits": self.splits,
            "records": [
                {
                    "identifier": r.identifier,
                    "spec": r.model.spec.to_dict(),
                    "label": r.label,
                    "info": r.info,
                }
                for r in self.records
            ],
        }

    def label_summary(self):
        labels = np.array([r.label for r in self.records], dtype=float)
        summary = {"count": len(self.records)}
        if self.task == "class-prediction":
            hist = np.bincount(labels.astype(int), minlength=self.n_classes or 0) if len(labels) else []
            summary["histogram"] = [int(n) for n in hist]
        elif len(labels):
            summary.update(min=float(labels.min()), max=float(labels.max()),
                           spread=float(labels.max() - labels.min()), mean=float(labels.mean()))
        summary["splits"] = {k: len(v) for k, v in self.splits.items()}
        return summary


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def encode_weights(model):
    return WEIGHT_MAGIC + bytes([WEIGHT_VERSION]) + flatten_weights(model).astype("<f4").tobytes()


def decode_weights(data, spec, name="<bytes>"):
    if data[:4] != WEIGHT_MAGIC:
        raise DataFormatError(f"{name}: bad magic {data[:4]!r}")
    if len(data) < 5 or data[4] != WEIGHT_VERSION:
        found = data[4] if len(data) > 4 else None
        raise VersionError(f"{name}: weight format version {found}, expected {WEIGHT_VERSION}")
    if (len(data) - 5) % 4:
        raise DataFormatError(f"{name}: payload is not a whole number of float32 values")
    flat = np.frombuffer(data, dtype="<f4", offset=5).astype(np.float32)
    return unflatten_weights(spec, flat)


def save_zoo(zoo, directory):
    directory = Path(directory)
    (directory / "weights").mkdir(parents=True, exist_ok=True)
    manifest = zoo.manifest()
    for rec, entry in zip(zoo.records, manifest["records"]):
        data = encode_weights(rec.model)
        fname = f"weights/{rec.identifier}.pgzw"
        (directory / fname).write_bytes(data)
        entry["weight_file"] = fname
        entry["crc32"] = zlib.crc32(data)
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, directory / "manifest.json")
    return directory


def read_manifest(directory):
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataFormatError(f"{path}: no zoo manifest") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: zoo format version {version!r}, this library reads {FORMAT_VERSION!r}")
    if manifest.get("task") not in TASKS:
        raise DataFormatError(f"{path}: unknown task kind {manifest.get('task')!r}")
    return manifest


def verify_zoo(directory):
    """Re-check every weight file CRC; returns the number of files checked."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    for entry in manifest["records"]:
        path = directory / entry["weight_file"]
        if not path.exists():
            raise DataFormatError(f"{path}: weight file missing")
        if zlib.crc32(path.read_bytes()) != entry["crc32"]:
            raise ChecksumError(f"{path}: CRC32 mismatch (file corrupted)")
    return len(manifest["records"])


def load_zoo(directory):
    directory = Path(directory)
    manifest = read_manifest(directory)
    records = []
    for entry in manifest["records"]:
        path = directory / entry["weight_file"]
        data = path.read_bytes()
        if zlib.crc32(data) != entry["crc32"]:
            raise ChecksumError(f"{path}: CRC32 mismatch (file corrupted)")
        spec = ArchitectureSpec.from_dict(entry["spec"])
        weights = decode_weights(data, spec, str(path))
        records.append(ZooRecord(ProbedModel(spec, weights, entry["identifier"]),
                                 entry["label"], entry.get("info", {})))
    return ModelZoo(manifest["task"], manifest["family"], manifest["seed"], records,
                    manifest["splits"], manifest.get("meta", {}))


def zoo_checksum(directory):
    """CRC32 over all weight files in manifest order (frozen-zoo checks)."""
    directory = Path(directory)
    crc = 0
    for entry in read_manifest(directory)["records"]:
        crc = zlib.crc32((directory / entry["weight_file"]).read_bytes(), crc)
    return crc


# ---------------------------------------------------------------------------
# INR zoo
# ---------------------------------------------------------------------------

@dataclass
class InrFitConfig:
    steps: int = 1000
    lr: float = 1e-3
    hidden: int = 32
    depth: int = 3
    omega: float = 30.0
    mse_ceiling: float = 0.05
    chunk: int = 100


def coordinate_grid(h, w):
    """Pixel-center coordinates mapped to [-1, 1]^2, row-major, as (x, y)."""
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float32)


def fit_inrs(images, spec, config, seeds):
    """Fit one INR per image jointly (stacked weights, independent Adam moments).

    The loss is the sum of per-image MSEs, so each INR receives exactly the
    gradient of its own fit. Returns (weights per image, final MSE per image).
    """
    n, h, w = images.shape
    coords = coordinate_grid(h, w)
    target = images.reshape(n, h * w, 1).astype(np.float32)
    inits = [init_weights(spec, np.random.default_rng(s)) for s in seeds]
    params = {}
    for l in range(len(spec.weighted_layers)):
        params[f"w{l}"] = np.stack([ws[l][0] for ws in inits])
        params[f"b{l}"] = np.stack([ws[l][1] for ws in inits])
    opt = Adam(config.lr)

    def step(train):
        g = Graph(np.float32)
        nodes = [(g.param(params[f"w{l}"], name=f"w{l}"), g.param(params[f"b{l}"], name=f"b{l}"))
                 for l in range(len(spec.weighted_layers))]
        out = build_forward(g, spec, nodes, g.constant(coords))
        loss = g.mse(out, target, scale=n)
        g.evaluate()
        if train:
            opt.step(params, g.named_grads(g.backward(loss)))
        return out.value

    for _ in range(config.steps):
        step(True)
    pred = step(False)
    mse = ((pred - target) ** 2).mean(axis=(1, 2))
    weights = [
        tuple((params[f"w{l}"][i].copy(), params[f"b{l}"][i].copy()) for l in range(len(spec.weighted_layers)))
        for i in range(n)
    ]
    return weights, mse


def generate_inr_zoo(dataset, count, config=None, seed=0, splits=(0.7, 0.15, 0.15)):
    """One INR per selected image, labeled with the image class."""
    config = config or InrFitConfig()
    if dataset.images.shape[1] != 1:
        raise ConfigError("INR zoos need single-channel images")
    if count > len(dataset):
        raise ConfigError(f"count {count} exceeds dataset size {len(dataset)}")
    spec = inr_spec(config.hidden, config.depth, config.omega)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.permutation(len(dataset))[:count])
    records, excluded = [], []
    for start in range(0, count, config.chunk):
        idx = chosen[start:start + config.chunk]
        seeds = [np.random.SeedSequence([seed, int(i)]) for i in range(start, start + len(idx))]
        weights, mse = fit_inrs(dataset.images[idx, 0], spec, config, seeds)
        for j, (i, ws, err) in enumerate(zip(idx, weights, mse)):
            ident = f"inr-{start + j:05d}"
            if not np.isfinite(err) or err > config.mse_ceiling:
                excluded.append(ident)
                continue
            records.append(ZooRecord(ProbedModel(spec, ws, ident), int(dataset.labels[i]),
                                     {"image_index": int(i), "fit_mse": float(err)}))
        log.info("fitted %d/%d INRs", min(start + config.chunk, count), count)
    n_classes = int(dataset.labels.max()) + 1 if len(dataset) else 0
    fit = [r.info["fit_mse"] for r in records]
    zoo = ModelZoo("class-prediction", "inr", int(seed), records, meta={
        "n_classes": n_classes,
        "dataset": dataset.provenance,
        "image_shape": [int(n) for n in dataset.images.shape[1:]],
        "fit": {"steps": config.steps, "lr": config.lr, "mse_ceiling": config.mse_ceiling,
                "mean_mse": float(np.mean(fit)) if fit else None},
        "excluded": excluded,
    })
    return zoo.assign_splits(splits)


# ---------------------------------------------------------------------------
# CNN zoo
# ---------------------------------------------------------------------------

@dataclass
class CnnHyperGrid:
    depth: tuple = (3, 5)
    channels: tuple = (8, 16, 24, 32)
    lr: tuple = (1e-4, 1e-1)
    epochs: tuple = (1, 5)
    init_scale: tuple = (0.5, 2.0)
    batch_size: int = 32
    n_classes: int = 10

    def sample(self, rng):
        depth = int(rng.integers(self.depth[0], self.depth[1] + 1))
        return {
            "channels": [int(c) for c in rng.choice(self.channels, size=depth)],
            "lr": float(np.exp(rng.uniform(np.log(self.lr[0]), np.log(self.lr[1])))),
            "epochs": int(rng.integers(self.epochs[0], self.epochs[1] + 1)),
            "init_scale": float(rng.uniform(*self.init_scale)),
        }


def cnn_accuracy(model, dataset, batch=256):
    if len(dataset) == 0:
        return 0.0
    hits = 0
    for start in range(0, len(dataset), batch):
        logits = model_forward(model, dataset.images[start:start + batch])
        hits += int((logits.argmax(axis=1) == dataset.labels[start:start + batch]).sum())
    return hits / len(dataset)


def train_cnn(spec, train, hyper, rng, batch_size=32):
    """Train one CNN with Adam; raises NonFiniteError on divergence."""
    weights = init_weights(spec, rng, hyper["init_scale"])
    params = {}
    for l, (w, b) in enumerate(weights):
        params[f"w{l}"], params[f"b{l}"] = w.copy(), b.copy()
    opt = Adam(hyper["lr"])
    n = len(train)
    for _ in range(hyper["epochs"]):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            g = Graph(np.float32)
            nodes = [(g.param(params[f"w{l}"], name=f"w{l}"), g.param(params[f"b{l}"], name=f"b{l}"))
                     for l in range(len(weights))]
            logits = build_forward(g, spec, nodes, g.constant(train.images[idx]))
            loss = g.softmax_cross_entropy(logits, train.labels[idx])
            g.evaluate()
            opt.step(params, g.named_grads(g.backward(loss)))
            if not all(np.isfinite(p).all() for p in params.values()):
                raise NonFiniteError("parameters diverged")
    return tuple((params[f"w{l}"], params[f"b{l}"]) for l in range(len(weights)))


def generate_cnn_zoo(train, test, count, grid=None, seed=0, splits=(0.7, 0.15, 0.15)):
    """CNNs trained with randomly drawn hyperparameters, labeled by test accuracy."""
    grid = grid or CnnHyperGrid()
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("CNN zoos need non-empty train and test splits")
    in_ch, size = train.images.shape[1], train.images.shape[2]
    records, excluded = [], []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        hyper = grid.sample(rng)
        spec = cnn_spec(hyper["channels"], in_ch, size, grid.n_classes)
        ident = f"cnn-{i:05d}"
        weights = None
        for attempt in range(2):
            try:
                weights = train_cnn(spec, train, hyper, rng, grid.batch_size)
                break
            except NonFiniteError:
                hyper = dict(hyper, lr=hyper["lr"] / 2, retried=True)
        if weights is None:
            excluded.append(ident)
            continue
        model = ProbedModel(spec, weights, ident)
        acc = cnn_accuracy(model, test)
        records.append(ZooRecord(model, float(acc), {"hyper": hyper}))
        if (i + 1) % 25 == 0:
            log.info("trained %d/%d CNNs", i + 1, count)
    zoo = ModelZoo("accuracy-regression", "cnn", int(seed), records, meta={
        "dataset": train.provenance,
        "image_shape": [int(in_ch), int(size), int(size)],
        "n_classes": grid.n_classes,
        "excluded": excluded,
    })
    return zoo.assign_splits(splits)
