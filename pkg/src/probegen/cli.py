"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numeric failure, 1 anything else.

Examples::

    probegen zoo generate --family inr --count 200 --out zoo/
    probegen train --config run.json --set n_probes=32 --out runs/a
    probegen visualize --kind probes --checkpoint runs/a/pipeline --out figs/
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .datasets import ImageDataset, ingest_cifar_binary, ingest_idx, synthetic_digits
from .exceptions import ConfigError, DataFormatError, NonFiniteError, ProbeGenError, ShapeError
from .experiment import (
    AXES, ExperimentConfig, load_checkpoint, pipeline_flops, run_ablation_suite, save_checkpoint,
    train_pipeline,
)
from .models import inr_spec, model_forward
from .probes import dump_raw, tile_grid, write_pgm, write_ppm
from .zoo import (
    CnnHyperGrid, InrFitConfig, generate_cnn_zoo, generate_inr_zoo, load_zoo, read_manifest,
    save_zoo, verify_zoo,
)

log = logging.getLogger("probegen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 0, 2, 3, 4, 1
GRAY = 0.5


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args):
    """Config file, then ``--set`` overrides, then dedicated flags."""
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
    cfg = ExperimentConfig.from_dict(data)
    changes = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        changes[key.strip()] = _parse_value(value)
    if getattr(args, "zoo", None):
        changes["zoo"] = args.zoo
    if args.seed is not None:
        changes["seed"] = args.seed
    for key in changes:
        node = cfg.values
        for part in key.split(".")[:-1]:
            node = node.get(part) if isinstance(node, dict) else None
        if not isinstance(node, dict) or key.split(".")[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args):
    if not args.out:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out, cfg, args, extra=None):
    doc = {"config": cfg.to_dict(), "threads": args.threads}
    doc.update(extra or {})
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_dataset(args):
    if args.idx:
        return ingest_idx(*args.idx)
    if args.cifar:
        return ingest_cifar_binary(args.cifar, grayscale=args.grayscale)
    size = args.image_size or (28 if args.family == "inr" else 8)
    count = args.dataset_size or (args.count if args.family == "inr" else 2000)
    return synthetic_digits(count, size, seed=args.seed or 0)


def cmd_zoo(args):
    if args.zoo_command == "generate":
        out = _out_dir(args)
        if args.count < 0:
            raise ConfigError("--count must be >= 0")
        seed = args.seed or 0
        data = _load_dataset(args)
        if args.family == "inr":
            fit = InrFitConfig(steps=args.steps, lr=args.lr)
            zoo = generate_inr_zoo(data, args.count, fit, seed)
        else:
            train, test = data.train_test_split(0.25, seed)
            zoo = generate_cnn_zoo(train, test, args.count, CnnHyperGrid(), seed)
        save_zoo(zoo, out)
        print(json.dumps(zoo.label_summary(), sort_keys=True))
        return EXIT_OK
    if args.zoo_command == "stats":
        zoo = load_zoo(args.path)
        summary = zoo.label_summary()
        summary.update(task=zoo.task, family=zoo.family, seed=zoo.seed,
                       excluded=len(zoo.meta.get("excluded", [])))
        print(json.dumps(summary, indent=2, sort_keys=True))
        return EXIT_OK
    n = verify_zoo(args.path)
    print(f"ok: {n} weight files verified")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    out = _out_dir(args)
    _write_resolved(out, cfg, args)
    est, report = train_pipeline(cfg, threads=args.threads)
    zoo_spec = load_zoo(cfg.zoo).records[0].model.spec if cfg.zoo else None
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    save_checkpoint(est, out / "pipeline", zoo_spec)
    print(f"{report.metric}: train {report.train_metric:.4f} test {report.test_metric:.4f} "
          f"gap {report.gap:.4f}")
    return EXIT_OK


def cmd_evaluate(args):
    est, _ = load_checkpoint(args.checkpoint)
    zoo = load_zoo(args.zoo)
    models, labels = zoo.split(args.split)
    if not models:
        raise DataFormatError(f"zoo split {args.split!r} is empty")
    score = float(est.score(models, labels))
    metric = "accuracy" if zoo.task == "class-prediction" else "kendall_tau"
    result = {"split": args.split, "metric": metric, "value": score, "count": len(models)}
    print(json.dumps(result, sort_keys=True))
    if args.out:
        (_out_dir(args) / "evaluation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_ablate(args):
    cfg = resolve_config(args)
    out = _out_dir(args)
    _write_resolved(out, cfg, args, {"axis": args.axis, "values": args.values, "seeds": args.seeds,
                                     "kinds": args.kinds})
    values = [_parse_value(v) for v in args.values] if args.values else None
    result = run_ablation_suite(cfg, args.axis, values, tuple(args.seeds), kinds=args.kinds)
    result.to_csv(out / "ablation.csv")
    result.summary_csv(out / "ablation_summary.csv")
    for row in result.summary():
        print(f"{row['value']}: n={row['n']} {result.metric}={row['metric_mean']} gap={row['gap_mean']}")
    return EXIT_OK


def cmd_flops(args):
    cfg = resolve_config(args)
    if cfg.zoo:
        manifest = read_manifest(cfg.zoo)
        if not manifest["records"]:
            raise DataFormatError("zoo is empty")
        from .models import ArchitectureSpec
        spec = ArchitectureSpec.from_dict(manifest["records"][0]["spec"])
        n_out = manifest["meta"].get("n_classes", 10) if manifest["task"] == "class-prediction" else 1
    else:
        spec, n_out = inr_spec(), 10
    report = pipeline_flops(cfg, spec, n_out, args.probes, args.batch)
    print(report.table())
    if args.out:
        out = _out_dir(args)
        _write_resolved(out, cfg, args)
        (out / "flops.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def _probe_pixel(coords, h, w):
    """Nearest grid cell (row, col) of coordinates in [-1, 1]^2 (x, y order)."""
    col = np.clip(np.round((coords[:, 0] + 1) / 2 * w - 0.5), 0, w - 1).astype(int)
    row = np.clip(np.round((coords[:, 1] + 1) / 2 * h - 0.5), 0, h - 1).astype(int)
    return row, col


def inr_probe_image(model, probes, h, w):
    """Gray canvas with the model's prediction at each probe's grid cell.

    Values are quantized to 8 bits; a prediction that would land on the gray
    level is nudged one level up so probe pixels stay distinguishable.
    """
    img = np.full((h, w), GRAY)
    values = np.clip(model_forward(model, probes).reshape(-1), 0.0, 1.0)
    levels = np.round(values * 255)
    gray_level = np.round(GRAY * 255)
    levels[levels == gray_level] += 1
    row, col = _probe_pixel(probes, h, w)
    img[row, col] = levels / 255
    return img


def cmd_visualize(args):
    est, spec = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    probes = est.current_probes()
    if args.kind == "probes":
        if probes is None:
            raise ConfigError("this pipeline has no probes")
        dump_raw(out / "probes.f32", probes)
        if probes.ndim == 2:
            np.savetxt(out / "probes.csv", probes, delimiter=",", header="x,y", comments="")
            print(f"wrote {len(probes)} coordinate probes")
            return EXIT_OK
        grid, layout, ranges = tile_grid(probes)
        if grid.shape[0] == 1:
            write_pgm(out / "probes.pgm", grid[0])
        elif grid.shape[0] == 3:
            write_ppm(out / "probes.ppm", grid)
        else:
            raise ShapeError(f"cannot render {grid.shape[0]}-channel probes")
        (out / "probes.json").write_text(json.dumps(
            {"layout": list(layout), "normalization": "per-probe min-max",
             "ranges": [list(r) for r in ranges]}, indent=2) + "\n")
        print(f"wrote {len(probes)} probes as a {layout[0]}x{layout[1]} grid")
        return EXIT_OK

    zoo = load_zoo(args.zoo)
    models, labels = zoo.split(args.split)
    models, labels = models[:args.models], labels[:args.models]
    if args.kind == "inr-repr":
        if zoo.family != "inr" or probes is None or probes.shape[1:] != (2,):
            raise ConfigError("inr-repr needs an INR zoo and a coordinate-probe pipeline")
        _, h, w = zoo.meta.get("image_shape", [1, 28, 28])
        for m in models:
            write_pgm(out / f"{m.identifier}.pgm", inr_probe_image(m, probes, h, w))
        print(f"wrote {len(models)} probe-location images")
        return EXIT_OK

    # logit-heatmap
    if probes is None or spec.output_shape[0] < 2:
        raise ConfigError("logit-heatmap needs a probing pipeline over models with >= 2 outputs")
    order = np.argsort(labels, kind="stable")
    path = out / "logit_heatmap.csv"
    n_out = spec.output_shape[0]
    with open(path, "w") as f:
        f.write("identifier,label,probe," + ",".join(f"p{j}" for j in range(n_out)) + "\n")
        for i in order:
            logits = model_forward(models[i], probes).astype(np.float64)
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            prob = z / z.sum(axis=1, keepdims=True)
            for p, row in enumerate(prob):
                f.write(f"{models[i].identifier},{labels[i]},{p}," + ",".join(f"{v:.8f}" for v in row) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted for nested keys)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="probegen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    zoo = sub.add_parser("zoo", help="generate, summarize or verify model zoos")
    zsub = zoo.add_subparsers(dest="zoo_command", required=True)
    gen = zsub.add_parser("generate", parents=[common])
    gen.add_argument("--family", choices=("inr", "cnn"), default="inr")
    gen.add_argument("--count", type=int, default=100)
    gen.add_argument("--image-size", type=int)
    gen.add_argument("--dataset-size", type=int, help="synthetic images to render")
    gen.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"))
    gen.add_argument("--cifar", nargs="+", metavar="BATCH")
    gen.add_argument("--grayscale", action="store_true")
    gen.add_argument("--steps", type=int, default=InrFitConfig.steps)
    gen.add_argument("--lr", type=float, default=InrFitConfig.lr)
    for name in ("stats", "verify"):
        p = zsub.add_parser(name, parents=[common])
        p.add_argument("path")

    train = sub.add_parser("train", parents=[common], help="train a pipeline on a zoo")
    train.add_argument("--zoo")

    ev = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a zoo split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--zoo", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))

    ab = sub.add_parser("ablate", parents=[common], help="sweep one axis over seeds")
    ab.add_argument("--zoo")
    ab.add_argument("--axis", required=True, choices=tuple(AXES))
    ab.add_argument("--values", nargs="+")
    ab.add_argument("--kinds", nargs="+", help="generator kinds (generator-depth axis)")
    ab.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])

    fl = sub.add_parser("flops", parents=[common], help="analytic FLOPs report")
    fl.add_argument("--zoo")
    fl.add_argument("--probes", type=int, default=128)
    fl.add_argument("--batch", type=int, default=64)

    vis = sub.add_parser("visualize", parents=[common], help="probe grids, INR probe maps, logit heatmaps")
    vis.add_argument("--kind", required=True, choices=("probes", "inr-repr", "logit-heatmap"))
    vis.add_argument("--checkpoint", required=True)
    vis.add_argument("--zoo")
    vis.add_argument("--split", default="test", choices=("train", "val", "test"))
    vis.add_argument("--models", type=int, default=16)
    return parser


COMMANDS = {"zoo": cmd_zoo, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "flops": cmd_flops, "visualize": cmd_visualize}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    else:
        limit = nullcontext()
    try:
        with limit:
            if args.command == "visualize" and args.kind != "probes" and not args.zoo:
                raise ConfigError(f"--zoo is required for --kind {args.kind}")
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ProbeGenError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
