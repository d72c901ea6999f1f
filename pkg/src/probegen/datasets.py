"""Image datasets: IDX (MNIST/FMNIST) and CIFAR-10 binary readers plus a
procedural digit-like glyph generator used when no downloads are available."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import ConsistencyError, DataFormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        index = np.asarray(index)
        return ImageDataset(self.images[index], self.labels[index], self.provenance)

    def train_test_split(self, test_fraction=0.25, seed=0):
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(data, magic, path):
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFileError(f"{path}: header declares {ndim} dims but file ends early")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise TruncatedFileError(
            f"{path}: expected {count} data bytes, found {len(data) - header}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def ingest_idx(images_path, labels_path, provenance="idx"):
    """Read an IDX image/label pair (big-endian headers, uint8 payloads)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise ConsistencyError(
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels"
        )
    images = images.astype(np.float32)[:, None] / 255.0
    return ImageDataset(images, labels.astype(np.int64), provenance)


def ingest_cifar_binary(paths, grayscale=False, provenance="cifar10"):
    """Read CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        data = _read_bytes(path)
        if len(data) % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD}"
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records.size and records[:, 0].max() > 9:
            raise ValueError(f"{path}: label byte {int(records[:, 0].max())} exceeds 9")
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    y = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    x = x.astype(np.float32) / 255.0
    if grayscale:
        x = x.mean(axis=1, keepdims=True)
        provenance += "-gs"
    return ImageDataset(x, y, provenance)


# Ten stroke templates on the unit square (x right, y down), loosely digit-shaped.
def _arc(cx, cy, rx, ry, a0, a1, n=12):
    t = np.linspace(np.radians(a0), np.radians(a1), n)
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


GLYPHS = {
    0: [_arc(0.5, 0.5, 0.22, 0.32, 0, 360, 20)],
    1: [[(0.38, 0.3), (0.52, 0.18), (0.52, 0.82)], [(0.38, 0.82), (0.66, 0.82)]],
    2: [_arc(0.5, 0.36, 0.2, 0.17, 200, 380) + [(0.3, 0.8), (0.72, 0.8)]],
    3: [_arc(0.48, 0.34, 0.2, 0.15, 210, 450), _arc(0.48, 0.64, 0.22, 0.17, 270, 510)],
    4: [[(0.62, 0.82), (0.62, 0.18), (0.28, 0.62), (0.76, 0.62)]],
    5: [[(0.7, 0.2), (0.34, 0.2), (0.32, 0.46)] + _arc(0.48, 0.61, 0.21, 0.19, 230, 495)],
    6: [[(0.64, 0.2), (0.36, 0.5)] + _arc(0.5, 0.64, 0.18, 0.17, 180, 540, 20)],
    7: [[(0.28, 0.2), (0.72, 0.2), (0.42, 0.82)], [(0.4, 0.5), (0.64, 0.5)]],
    8: [_arc(0.5, 0.34, 0.17, 0.15, 0, 360, 16), _arc(0.5, 0.65, 0.21, 0.17, 0, 360, 16)],
    9: [_arc(0.5, 0.37, 0.18, 0.17, 0, 360, 16), [(0.68, 0.4), (0.58, 0.82)]],
}


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    t = np.zeros_like(px) if denom == 0 else np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0, 1)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def render_glyph(label, size, rng, jitter=1.0):
    """Rasterize one jittered glyph as a (size, size) float image in [0, 1]."""
    angle = rng.uniform(-0.3, 0.3) * jitter
    scale = 1.0 + rng.uniform(-0.15, 0.1) * jitter
    shear = rng.uniform(-0.25, 0.25) * jitter
    shift = rng.uniform(-0.08, 0.08, size=2) * jitter
    thickness = rng.uniform(0.045, 0.085)
    c, s = np.cos(angle), np.sin(angle)
    m = scale * np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]])

    grid = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(grid, grid)
    dist = np.full((size, size), np.inf)
    for stroke in GLYPHS[int(label)]:
        pts = (np.asarray(stroke) - 0.5) @ m.T + 0.5 + shift
        pts = pts + rng.normal(0, 0.015 * jitter, size=pts.shape)
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(px, py, a, b))
    aa = 0.75 / size
    return np.clip((thickness + aa - dist) / (2 * aa), 0.0, 1.0)


def synthetic_digits(n, size=28, seed=0, jitter=1.0, noise=0.0, n_classes=10):
    """Balanced, shuffled set of procedurally rendered digit-like glyphs."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % n_classes)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        img = render_glyph(label, size, rng, jitter)
        if noise:
            img = np.clip(img + rng.normal(0, noise, img.shape), 0, 1)
        images[i, 0] = img
    return ImageDataset(images, labels, f"synthetic-glyphs-{size}")
