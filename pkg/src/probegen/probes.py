"""Probe sources: shared generators over per-probe latent codes, vanilla
(identity) probes, and unlearned synthetic probes.

A generator maps a latent matrix ``Z`` of shape (k, d) to k probes. All
generator parameters are shared by every probe; only the latent rows are
per-probe. Linear kinds stack affine or transposed-convolution layers with
no activation in between, so they compose to a single affine map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .exceptions import ConfigError, ContractError, ShapeError

GENERATOR_KINDS = ("identity", "fc-linear", "fc-nonlinear", "conv-linear", "conv-nonlinear")
LINEAR_KINDS = ("identity", "fc-linear", "conv-linear")


@dataclass
class GeneratorConfig:
    kind: str = "conv-linear"
    depth: int = 2
    output_shape: tuple = (2,)
    latent_dim: int = 32
    width_multiplier: int = 16
    hidden: int = 32
    activation: str = "relu"

    def __post_init__(self):
        self.output_shape = tuple(int(n) for n in self.output_shape)
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.kind != "identity" and self.depth < 1:
            raise ConfigError("generator depth must be >= 1")
        if self.kind.startswith("conv"):
            if len(self.output_shape) != 3:
                raise ConfigError("conv generators produce (C, H, W) images")
            _, h, w = self.output_shape
            if h != w or h < 2 or h & (h - 1):
                raise ConfigError(f"conv generators need square power-of-two outputs, got {h}x{w}")

    @property
    def is_linear(self):
        return self.kind in LINEAR_KINDS

    @property
    def effective_latent_dim(self):
        if self.kind == "identity":
            return int(np.prod(self.output_shape))
        return self.latent_dim

    def to_dict(self):
        d = asdict(self)
        d["output_shape"] = list(self.output_shape)
        return d


@dataclass(frozen=True)
class Stage:
    """One transposed-convolution stage of an image generator."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    pad: int
    size_in: int
    size_out: int


def conv_plan(config):
    """Seed map shape and transposed-conv stages for an image generator.

    The latent is projected to a (16 * 2**(L-1), s, s) seed map; each stage
    halves the channels (the last emits the image channels). Doubling stages
    use kernel 4, stride 2, pad 1. When the depth exceeds log2(size), the
    extra leading stages keep the size (kernel 3, stride 1, pad 1); when it is
    smaller, the seed map starts at size / 2**L. Non-linear kinds put a ReLU
    between consecutive stages, so depth 1 is linear for every kind.
    """
    c_out, size, _ = config.output_shape
    depth = config.depth
    n_double = int(np.log2(size))
    n_keep = max(0, depth - n_double)
    seed_size = size >> min(depth, n_double)
    channels = [config.width_multiplier * 2 ** (depth - 1 - i) for i in range(depth)]
    stages, s = [], seed_size
    for i in range(depth):
        cin = channels[i]
        cout = channels[i + 1] if i + 1 < depth else c_out
        if i < n_keep:
            stages.append(Stage(cin, cout, 3, 1, 1, s, s))
        else:
            stages.append(Stage(cin, cout, 4, 2, 1, s, 2 * s))
            s *= 2
    return (channels[0], seed_size, seed_size), stages


def fc_plan(config):
    """Layer widths of a fully-connected generator, latent first."""
    if len(config.output_shape) == 1:
        return [config.latent_dim] + [config.hidden] * (config.depth - 1) + [config.output_shape[0]]
    # image FC generator mirrors the conv plan (seed map + every intermediate
    # map) with 3 * H_i * W_i units, never narrower than the latent
    seed, stages = conv_plan(config)
    sizes = [seed[1]] + [st.size_out for st in stages[:-1]]
    hidden = [max(3 * s * s, config.latent_dim) for s in sizes]
    return [config.latent_dim] + hidden + [int(np.prod(config.output_shape))]


def _uniform(rng, fan, shape, gain=1.0):
    """Variance-preserving uniform init: Var(w) = gain**2 / fan."""
    bound = gain * np.sqrt(3.0 / fan)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ProbeGenerator:
    """Shared probe generator ``G``; parameters live in :attr:`params`.

    Weights are drawn so every layer preserves the activation variance
    (``fan`` counts the terms summed into one output; a transposed conv with
    stride s sums in_channels * (k/s)**2 of them) and biases start at zero.
    A deep linear generator therefore maps unit-variance latents to
    unit-variance, mutually distinct probes at any depth.
    """

    def __init__(self, config, rng=None, params=None):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(rng))
        self.params = params

    def _init_params(self, rng):
        cfg = self.config
        params = {}
        if cfg.kind == "identity":
            return params
        relu_gain = np.sqrt(2.0) if cfg.kind.endswith("nonlinear") else 1.0
        if cfg.kind.startswith("fc"):
            dims = fc_plan(cfg)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                params[f"gen.fc{i}.w"] = _uniform(rng, a, (b, a), relu_gain if i > 0 else 1.0)
                params[f"gen.fc{i}.b"] = np.zeros(b, dtype=np.float32)
            return params
        seed_shape, stages = conv_plan(cfg)
        n_seed = int(np.prod(seed_shape))
        params["gen.seed.w"] = _uniform(rng, cfg.latent_dim, (n_seed, cfg.latent_dim))
        params["gen.seed.b"] = np.zeros(n_seed, dtype=np.float32)
        for i, st in enumerate(stages):
            fan = st.in_channels * (st.kernel // st.stride) ** 2
            params[f"gen.up{i}.w"] = _uniform(rng, fan, (st.in_channels, st.out_channels, st.kernel, st.kernel),
                                              relu_gain if i > 0 else 1.0)
            params[f"gen.up{i}.b"] = np.zeros(st.out_channels, dtype=np.float32)
        return params

    @property
    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def build(self, g, z, trainable=True):
        """Append ``G(z)`` to graph ``g``; returns a (k, *output_shape) node."""
        cfg = self.config
        shape = cfg.output_shape
        if cfg.kind == "identity":
            return g.reshape(z, (-1,) + shape, name="probes")
        nonlinear = cfg.kind.endswith("nonlinear")

        def p(name):
            return g.param(self.params[name], name=name, trainable=trainable)

        if cfg.kind.startswith("fc"):
            n_layers = len(fc_plan(cfg)) - 1
            x = z
            for i in range(n_layers):
                x = g.affine(x, p(f"gen.fc{i}.w"), p(f"gen.fc{i}.b"), name=f"gen.fc{i}")
                if nonlinear and i < n_layers - 1:
                    x = g.relu(x)
            return g.reshape(x, (-1,) + shape, name="probes")

        seed_shape, stages = conv_plan(cfg)
        x = g.affine(z, p("gen.seed.w"), p("gen.seed.b"), name="gen.seed")
        x = g.reshape(x, (-1,) + seed_shape)
        for i, st in enumerate(stages):
            if nonlinear and i > 0:
                x = g.relu(x)
            x = g.conv_transpose2d(x, p(f"gen.up{i}.w"), p(f"gen.up{i}.b"),
                                   stride=st.stride, pad=st.pad, name=f"gen.up{i}")
        return g.reshape(x, (-1,) + shape, name="probes")

    def __call__(self, latents, dtype=np.float32):
        latents = np.asarray(latents)
        d = self.config.effective_latent_dim
        if latents.ndim != 2 or latents.shape[1] != d:
            raise ShapeError(f"latents must be (k, {d}), got {latents.shape}")
        g = Graph(dtype, frozen_grads=False)
        out = self.build(g, g.constant(latents), trainable=False)
        return g.evaluate(outputs=[out])[out]


def calibrate_output(generator, latents, mean, std):
    """Rescale the last layer so ``G(latents)`` has the given overall mean/std.

    Only the final (always linear) layer changes, so linearity and the
    sharing structure are untouched. Returns the generator.
    """
    cfg = generator.config
    if cfg.kind == "identity":
        raise ContractError("identity generators have no parameters to calibrate")
    if cfg.kind.startswith("fc"):
        last = f"gen.fc{len(fc_plan(cfg)) - 2}"
    else:
        last = f"gen.up{len(conv_plan(cfg)[1]) - 1}"
    out = generator(latents, np.float64)
    cur_std = out.std()
    if not np.isfinite(cur_std) or cur_std == 0:
        raise ContractError("generator output is constant; cannot calibrate")
    ratio = std / cur_std
    params = dict(generator.params)
    params[last + ".w"] = (params[last + ".w"] * ratio).astype(np.float32)
    params[last + ".b"] = (params[last + ".b"] * ratio + (mean - out.mean() * ratio)).astype(np.float32)
    generator.params = params
    return generator


def build_linear_conv_generator(config, rng=None):
    """Initialized conv-linear generator for ``config`` (kind is forced)."""
    if not config.kind.startswith("conv"):
        raise ConfigError(f"expected a conv generator config, got {config.kind!r}")
    cfg = GeneratorConfig(**{**config.to_dict(), "kind": "conv-linear"})
    return ProbeGenerator(cfg, rng)


def init_latents(k, config, rng, scale=1.0):
    """Per-probe latent codes, standard normal times ``scale``."""
    if k < 1:
        raise ConfigError("need at least one probe")
    rng = np.random.default_rng(rng)
    return (scale * rng.standard_normal((k, config.effective_latent_dim))).astype(np.float32)


@dataclass
class ProbeSet:
    probes: np.ndarray
    source: str = "generated"
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.probes)


def generate_probes(latents, generator):
    """``p_i = G(z_i)`` for every latent row."""
    return ProbeSet(generator(latents), "generated",
                    {"generator": generator.config.to_dict()})


def synthetic_uniform_coords(k, seed=0):
    if k < 1:
        raise ConfigError("need at least one probe")
    rng = np.random.default_rng(seed)
    return ProbeSet(rng.uniform(-1.0, 1.0, size=(k, 2)).astype(np.float32), "synthetic-uniform")


def dead_leaves_image(h, w, channels=1, seed=0, return_count=False):
    """Dead Leaves image: opaque discs with power-law radii until full coverage.

    Radii follow a density proportional to r**-3 on
    [0.03 * min(h, w), 0.5 * min(h, w)]. Each new disc only paints pixels no
    earlier disc covered (newest on bottom).
    """
    if h < 8 or w < 8:
        raise ConfigError("dead leaves images need H, W >= 8")
    rng = np.random.default_rng(seed)
    rmin, rmax = 0.03 * min(h, w), 0.5 * min(h, w)
    a, b = rmin ** -2, rmax ** -2
    img = np.full((channels, h, w), -1.0)
    covered = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    count = 0
    while not covered.all():
        r = (a - rng.random() * (a - b)) ** -0.5
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        color = rng.random(channels)
        disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        paint = disc & ~covered
        img[:, paint] = color[:, None]
        covered |= disc
        count += 1
    img = img.astype(np.float32)
    return (img, count) if return_count else img


def dead_leaves_probes(k, shape, seed=0):
    c, h, w = shape
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(k)
    probes = np.stack([dead_leaves_image(h, w, c, np.random.default_rng(s)) for s in seeds])
    return ProbeSet(probes, "synthetic-dead-leaves")


def linearity_residual(generator, trials=10, seed=0, dtype=np.float32):
    """max ||G(a+b) - G(a) - G(b) + G(0)||_inf / (1 + ||G(a)||_inf) over trials."""
    if not generator.config.is_linear:
        raise ContractError(f"linearity test is undefined for {generator.config.kind!r} generators")
    rng = np.random.default_rng(seed)
    d = generator.config.effective_latent_dim
    worst = 0.0
    for _ in range(trials):
        z1, z2 = rng.standard_normal((2, 1, d))
        batch = np.concatenate([z1 + z2, z1, z2, np.zeros((1, d))]).astype(dtype)
        out = generator(batch, dtype=dtype).astype(np.float64)
        resid = np.abs(out[0] - out[1] - out[2] + out[3]).max()
        worst = max(worst, resid / (1.0 + np.abs(out[1]).max()))
    return float(worst)


def collapse_linear_generator(generator, dtype=np.float64):
    """Single affine map (A, c) with ``G(z) = A z + c`` for a linear generator.

    Built by probing the generator on the zero latent and the basis vectors.
    """
    if not generator.config.is_linear:
        raise ContractError(f"{generator.config.kind!r} generators are not affine")
    d = generator.config.effective_latent_dim
    basis = np.concatenate([np.zeros((1, d)), np.eye(d)]).astype(dtype)
    out = generator(basis, dtype=dtype).reshape(d + 1, -1)
    c = out[0]
    return (out[1:] - c).T, c


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _to_bytes(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_pgm(path, image):
    """Binary PGM (P5) of a 2-D array in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D image, got {image.shape}")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + _to_bytes(image).tobytes())


def write_ppm(path, image):
    """Binary PPM (P6) of a (3, H, W) array in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"PPM needs a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    data = _to_bytes(image.transpose(1, 2, 0))
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pnm(path):
    """Read a P5/P6 file written by :func:`write_pgm` / :func:`write_ppm`."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    kind, w, h, maxval, payload = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / maxval
    if kind == b"P5":
        return arr.reshape(h, w)
    return arr.reshape(h, w, 3).transpose(2, 0, 1)


def tile_grid(images, pad=1, normalize=True):
    """Tile (k, C, H, W) images into one (C, rows*H, cols*W) grid.

    With ``normalize`` each probe is min-max scaled to [0, 1] independently;
    the per-probe (min, max) pairs are returned alongside the grid.
    """
    images = np.asarray(images, dtype=np.float64)
    k, c, h, w = images.shape
    cols = int(np.ceil(np.sqrt(k)))
    rows = int(np.ceil(k / cols))
    grid = np.ones((c, rows * (h + pad) - pad, cols * (w + pad) - pad))
    ranges = []
    for i, img in enumerate(images):
        lo, hi = float(img.min()), float(img.max())
        ranges.append((lo, hi))
        if normalize:
            img = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
        r, q = divmod(i, cols)
        grid[:, r * (h + pad):r * (h + pad) + h, q * (w + pad):q * (w + pad) + w] = img
    return grid, (rows, cols), ranges


def dump_raw(path, array):
    """Raw little-endian float32 dump (shape is the caller's business)."""
    Path(path).write_bytes(np.asarray(array, dtype="<f4").tobytes())
