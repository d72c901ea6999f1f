"""Acceptance suite: one PASS/FAIL line per criterion.

The trend criteria train on desk-scale zoos cached under ``.cache/`` in the
repository root; missing caches are regenerated (about 20 CPU-minutes).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from probegen.autodiff import Graph, check_gradients
from probegen.cli import main
from probegen.datasets import synthetic_digits
from probegen.experiment import ExperimentConfig, pipeline_flops, train_pipeline
from probegen.models import ProbedModel, build_forward, cnn_spec, init_weights, inr_spec, permute_hidden_neurons
from probegen.predictors import MLPHead, probe_representation, statnn_vector
from probegen.probes import (
    GeneratorConfig, ProbeGenerator, collapse_linear_generator, fc_plan, linearity_residual,
)
from probegen.zoo import (
    CnnHyperGrid, InrFitConfig, generate_cnn_zoo, generate_inr_zoo, load_zoo, save_zoo, verify_zoo,
)

CACHE = Path(__file__).resolve().parent.parent / ".cache"
SEEDS = (0, 1, 2)
LINES = []


def report(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    assert ok, line


def cached_zoo(name, build):
    path = CACHE / name
    if (path / "manifest.json").exists():
        try:
            verify_zoo(path)
            return load_zoo(path)
        except Exception:
            pass
    zoo = build()
    save_zoo(zoo, path)
    return zoo


@pytest.fixture(scope="module")
def inr_desk_zoo():
    """2000 INRs fitted to synthetic 28x28 digit glyphs, 10 balanced classes."""
    def build():
        ds = synthetic_digits(2000, 28, seed=0)
        return generate_inr_zoo(ds, 2000, InrFitConfig(steps=200, lr=3e-3), seed=0)
    return cached_zoo("inr-2000", build)


@pytest.fixture(scope="module")
def cnn_desk_zoo():
    """300 CNNs with sampled depth, widths and training schedule on 8x8 glyphs."""
    def build():
        train, test = synthetic_digits(2000, 8, seed=0).train_test_split(0.25, 0)
        return generate_cnn_zoo(train, test, 300, CnnHyperGrid(), seed=0)
    return cached_zoo("cnn-300", build)


def sweep(zoo, runs):
    """{name: [MetricReport per seed]} for dicts of config overrides."""
    out = {}
    for name, overrides in runs.items():
        out[name] = []
        for seed in SEEDS:
            _, rep = train_pipeline(ExperimentConfig.from_dict({**overrides, "seed": seed}), zoo)
            out[name].append(rep)
    return out


@pytest.fixture(scope="module")
def inr_results(inr_desk_zoo):
    return sweep(inr_desk_zoo, {
        "probegen": {"method": "probegen", "n_probes": 64},
        "vanilla": {"method": "vanilla", "n_probes": 64},
        "synthetic": {"method": "synthetic-uniform", "n_probes": 64},
    })


@pytest.fixture(scope="module")
def cnn_results(cnn_desk_zoo):
    return sweep(cnn_desk_zoo, {
        "probegen": {"method": "probegen", "n_probes": 64},
        "vanilla": {"method": "vanilla", "n_probes": 64},
        "entropy": {"method": "entropy-only", "n_probes": 64},
        "nonlinear": {"method": "probegen", "n_probes": 64, "generator": {"kind": "conv-nonlinear"}},
    })


def mean_test(reports):
    return float(np.mean([r.test_metric for r in reports]))


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# ---------------------------------------------------------------------------

def test_1_permutation_invariance():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    coord_probes = rng.uniform(-1, 1, (16, 2)).astype(np.float32)
    image_probes = rng.random((16, 1, 8, 8)).astype(np.float32)
    worst, stat_exact = 0.0, True
    for i in range(20):
        if i % 2 == 0:
            spec, probes = inr_spec(), coord_probes
        else:
            spec, probes = cnn_spec([8, 16, 8]), image_probes
        model = ProbedModel(spec, init_weights(spec, rng), f"m{i}")
        base_rep = probe_representation(model, probes).features
        base_stat = statnn_vector(model)
        hidden = [w.shape[0] for w, _ in model.weights[:-1]]
        for _ in range(10):
            layer = int(rng.integers(len(hidden)))
            perm = rng.permutation(hidden[layer])
            twin = permute_hidden_neurons(model, layer, perm)
            worst = max(worst, rel_err(probe_representation(twin, probes).features, base_rep))
            stat_exact &= bool(np.array_equal(statnn_vector(twin), base_stat))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-5 and stat_exact and elapsed < 60,
           f"max rel err {worst:.2e} (<=1e-5), statnn exact {stat_exact}, {elapsed:.1f}s (<60s)")


def _op_graphs(rng):
    def conv_model():
        g = Graph(np.float64)
        x = g.param(rng.standard_normal((2, 2, 5, 5)), name="x")
        y = g.conv2d(x, g.param(rng.standard_normal((3, 2, 3, 3))), g.param(rng.standard_normal(3)), 2, 1)
        return g, g.mean(g.mul(y, y))

    def conv_t():
        g = Graph(np.float64)
        x = g.param(rng.standard_normal((2, 3, 2, 2)), name="x")
        y = g.conv_transpose2d(x, g.param(rng.standard_normal((3, 2, 4, 4))), g.param(rng.standard_normal(2)), 2, 1)
        return g, g.mean(g.mul(y, y))

    def simple(build, shape):
        g = Graph(np.float64)
        x = g.param(shape(), name="x")
        return g, build(g, x)

    def relu_input():
        v = rng.standard_normal((4, 5))
        v[np.abs(v) < 0.05] = 0.5
        return v

    def concat():
        g = Graph(np.float64)
        y = g.concat([g.param(rng.standard_normal((2, 3))), g.param(rng.standard_normal((1, 3)))], axis=0)
        return g, g.mean(g.mul(y, g.constant(rng.standard_normal((3, 3)))))

    def add():
        g = Graph(np.float64)
        a = g.param(rng.standard_normal((3, 4)))
        y = g.add(a, g.param(rng.standard_normal(4)))
        return g, g.mean(g.mul(y, a))

    n = rng.standard_normal
    return {
        "affine": simple(lambda g, x: g.mean(g.affine(x, g.param(n((2, 4))), g.param(n(2)))), lambda: n((3, 4))),
        "conv2d": conv_model(),
        "conv_transpose2d": conv_t(),
        "sin": simple(lambda g, x: g.mean(g.sin(x, omega=3.0)), lambda: n((4, 3))),
        "relu": simple(lambda g, x: g.mean(g.mul(g.relu(x), g.relu(x))), relu_input),
        "reshape": simple(lambda g, x: g.mean(g.mul(g.reshape(x, (3, 4)), g.constant(n((3, 4))))),
                          lambda: n((2, 6))),
        "concat": concat(),
        "softmax": simple(lambda g, x: g.mean(g.mul(g.softmax(x), g.constant(n((3, 5))))), lambda: n((3, 5))),
        "softmax_cross_entropy": simple(lambda g, x: g.softmax_cross_entropy(x, np.array([0, 4, 2, 2])),
                                        lambda: n((4, 5))),
        "mse": simple(lambda g, x: g.mse(x, n((4, 1))), lambda: n((4, 1))),
        "mean": simple(lambda g, x: g.mean(g.mul(g.mean(x, axis=1), g.mean(x, axis=1))), lambda: n((3, 4))),
        "softmax_entropy": simple(lambda g, x: g.mean(g.softmax_entropy(x)), lambda: n((2, 3, 4))),
        "add/mul": add(),
    }


def _pipeline_graph(rng):
    """latents -> conv-linear generator -> two CNNs -> MLP head -> cross-entropy."""
    g = Graph(np.float64)
    gen = ProbeGenerator(GeneratorConfig("conv-linear", 2, (1, 4, 4), latent_dim=4, width_multiplier=2), rng)
    gen.params = {k: v.astype(np.float64) for k, v in gen.params.items()}
    probes = gen.build(g, g.param(rng.standard_normal((3, 4)), name="latents"))
    spec = cnn_spec([3, 2], image_size=4, n_classes=3)
    rows = []
    for i in range(2):
        w = init_weights(spec, rng)
        nodes = [(g.frozen(a.astype(np.float64)), g.frozen(b.astype(np.float64))) for a, b in w]
        rows.append(g.reshape(build_forward(g, spec, nodes, probes), (1, -1)))
    head = MLPHead(9, 3, depth=3, hidden=5, rng=1)
    head.params = {k: v.astype(np.float64) for k, v in head.params.items()}
    return g, g.softmax_cross_entropy(head.build(g, g.concat(rows, axis=0)), np.array([2, 0]))


def test_2_gradient_correctness():
    start = time.perf_counter()
    worst, worst_kind = 0.0, ""
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        graphs = _op_graphs(rng)
        graphs["pipeline"] = _pipeline_graph(rng)
        for kind, (g, loss) in graphs.items():
            g.evaluate()
            err = check_gradients(g, loss, samples=100, seed=seed)
            if err > worst:
                worst, worst_kind = err, kind
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-4 and elapsed < 120,
           f"max rel err {worst:.2e} at {worst_kind} (<=1e-4), 14 graphs x 3 seeds, {elapsed:.1f}s (<120s)")


def test_3_deep_linear_collapse():
    start = time.perf_counter()
    worst_lin, worst_collapse = 0.0, 0.0
    z = np.random.default_rng(5).standard_normal((8, 32))
    for kind, shape in (("fc-linear", (2,)), ("fc-linear", (1, 8, 8)), ("conv-linear", (1, 16, 16))):
        for depth in range(1, 6):
            gen = ProbeGenerator(GeneratorConfig(kind, depth, shape), depth)
            worst_lin = max(worst_lin, linearity_residual(gen, dtype=np.float32))
            # oracle: multiply out the layer matrices (FC) or use the single collapsed map (conv)
            deep = gen(z, np.float64).reshape(len(z), -1)
            if kind == "fc-linear":
                p = {k: v.astype(np.float64) for k, v in gen.params.items()}
                a, c = np.eye(32), np.zeros(32)
                for i in range(len(fc_plan(gen.config)) - 1):
                    a, c = p[f"gen.fc{i}.w"] @ a, p[f"gen.fc{i}.w"] @ c + p[f"gen.fc{i}.b"]
            else:
                a, c = collapse_linear_generator(gen)
            worst_collapse = max(worst_collapse, rel_err(z @ a.T + c, deep))
    elapsed = time.perf_counter() - start
    report(3, worst_lin <= 1e-4 and worst_collapse <= 1e-5 and elapsed < 60,
           f"linearity residual {worst_lin:.2e} (<=1e-4), collapse rel err {worst_collapse:.2e} (<=1e-5), "
           f"{elapsed:.1f}s (<60s)")


def test_4_inr_probegen_beats_vanilla(inr_results):
    pg, van = mean_test(inr_results["probegen"]), mean_test(inr_results["vanilla"])
    secs = sum(r.wall_clock for k in ("probegen", "vanilla") for r in inr_results[k])
    ok = pg - van >= 0.02 and min(pg, van) > 0.3 and secs < 1800
    report(4, ok, f"probegen {pg:.3f} vs vanilla {van:.3f} (margin >= 0.02, both > 0.30), "
                  f"training {secs / 60:.1f} min (<30)")


def test_5_cnn_regression_trend(cnn_desk_zoo, cnn_results):
    spread = cnn_desk_zoo.label_summary()["spread"]
    pg, van = mean_test(cnn_results["probegen"]), mean_test(cnn_results["vanilla"])
    secs = sum(r.wall_clock for k in ("probegen", "vanilla") for r in cnn_results[k])
    ok = spread >= 0.3 and pg >= van and pg >= 0.5 and secs < 3600
    report(5, ok, f"probegen tau {pg:.3f} vs vanilla {van:.3f}, spread {spread:.2f} (>=0.3), "
                  f"training {secs / 60:.1f} min (<60)")


def test_6_nonlinear_generator_overfits_more(cnn_results):
    lin = float(np.mean([r.gap for r in cnn_results["probegen"]]))
    nonlin = float(np.mean([r.gap for r in cnn_results["nonlinear"]]))
    report(6, nonlin >= lin, f"mean gap conv-nonlinear {nonlin:.3f} vs conv-linear {lin:.3f}")


def test_7_synthetic_probes_match_vanilla(inr_results):
    syn, van = mean_test(inr_results["synthetic"]), mean_test(inr_results["vanilla"])
    report(7, abs(syn - van) <= 0.05,
           f"uniform synthetic {syn:.3f} vs vanilla {van:.3f} (|diff| <= 0.05; coordinate zoo)")


def test_8_entropy_baseline(cnn_results):
    ent, pg = mean_test(cnn_results["entropy"]), mean_test(cnn_results["probegen"])
    report(8, ent >= 0.6 * pg, f"entropy-only tau {ent:.3f} vs 0.6 x probegen {0.6 * pg:.3f}")


def test_9_flops_hand_count():
    # INR layer table 2-32-32-32-1; coordinate generator 32-32-2; head k -> 256 x5 -> 10
    k, batch = 128, 64
    gen = 2 * k * (32 * 32 + 32 * 2)
    model = 2 * batch * k * (2 * 32 + 32 * 32 + 32 * 32 + 32 * 1)
    head = 2 * batch * (k * 256 + 4 * 256 * 256 + 256 * 10)
    cfg = ExperimentConfig.from_dict({"n_probes": k})
    rep = pipeline_flops(cfg, inr_spec(), 10, k, batch)
    doubled = pipeline_flops(cfg, inr_spec(), 10, 2 * k, batch)
    ok = (rep.forward == {"generator": gen, "model": model, "head": head}
          and doubled.forward["model"] == 2 * rep.forward["model"])
    report(9, ok, f"forward {rep.forward} vs hand count generator {gen}, model {model}, head {head}; "
                  f"2k model term {doubled.forward['model']}")


def test_10_serialization(tmp_path):
    ds = synthetic_digits(100, 8, seed=3)
    zoo = generate_inr_zoo(ds, 100, InrFitConfig(steps=20, lr=3e-3, mse_ceiling=np.inf), seed=3)
    save_zoo(zoo, tmp_path / "zoo")
    again = load_zoo(tmp_path / "zoo")
    identical = len(again.records) == 100 and all(
        a.model.spec == b.model.spec and all(
            wa.tobytes() == wb.tobytes() and ba.tobytes() == bb.tobytes()
            for (wa, ba), (wb, bb) in zip(a.model.weights, b.model.weights))
        for a, b in zip(zoo.records, again.records))
    save_zoo(again, tmp_path / "zoo2")
    files = sorted((tmp_path / "zoo" / "weights").iterdir())
    same_files = all(f.read_bytes() == (tmp_path / "zoo2" / "weights" / f.name).read_bytes() for f in files)
    rng = np.random.default_rng(0)
    detected = 0
    for f in files:
        original = f.read_bytes()
        data = bytearray(original)
        data[int(rng.integers(len(data)))] ^= 1 << int(rng.integers(8))
        f.write_bytes(bytes(data))
        try:
            verify_zoo(tmp_path / "zoo")
        except Exception as exc:
            detected += f.name in str(exc)
        f.write_bytes(original)
    report(10, identical and same_files and detected == len(files),
           f"round trip bitwise {identical and same_files}, corruption detected {detected}/{len(files)}")


def test_11_cli_determinism(tmp_path):
    small = tmp_path / "zoo"
    ds = synthetic_digits(80, 12, seed=4)
    save_zoo(generate_inr_zoo(ds, 80, InrFitConfig(steps=60, lr=3e-3), seed=4), small)
    argv = ["train", "--zoo", str(small), "--seed", "7", "--threads", "1",
            "--set", "n_probes=16", "--set", "epochs=3"]
    codes = [main(argv + ["--out", str(tmp_path / run)]) for run in ("a", "b")]
    a, b = (tmp_path / "a" / "report.csv").read_bytes(), (tmp_path / "b" / "report.csv").read_bytes()
    report(11, codes == [0, 0] and a == b, f"exit codes {codes}, report.csv identical {a == b} ({len(a)} bytes)")
