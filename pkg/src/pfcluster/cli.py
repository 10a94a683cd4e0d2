"""``pfc`` command line: train, cluster, bench, sweep, stability, gen-data.

Every subcommand resolves its configuration as defaults < JSON file < flags,
rejects unknown keys, and writes a manifest (resolved config, seeds and
SHA-256 checksums of the files it produced) next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import CheckpointError, ConfigError, InputError, NumericError, PfcError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("pfcluster")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def _defaults() -> dict[str, dict[str, Any]]:
    from .bench import SuiteConfig
    from .model import ModelConfig
    from .prior import PriorConfig
    from .training import TrainConfig

    def plain(obj):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(obj).items()}

    prior = plain(PriorConfig())
    return {
        "train": {"model": plain(ModelConfig()), "prior": prior, "train": plain(TrainConfig())},
        "cluster": {"clusters": None, "chunk_size": None, "rounds": 2, "m": 10},
        "bench": plain(SuiteConfig()),
        "sweep": {"dataset": "moons", "n": 2000, "ks": [2, 25, 50, 100], "seeds": list(range(20))},
        "stability": {"prior": prior, "ks": [10, 25, 50, 100, 200], "probes_per_k": 200, "queries": 32},
        "gen-data": {"kind": "moons", "n": 2000, "noise": None, "seed": 0},
    }


def _type_ok(default, value) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        elif not _type_ok(base[key], value):
            raise ConfigError(f"config key {where!r}: expected {type(base[key]).__name__}, "
                              f"got {type(value).__name__}")
        else:
            base[key] = float(value) if isinstance(base[key], float) else value


def resolve_config(defaults: dict, file: str | None = None, flags: dict | None = None) -> dict:
    """Nested config with precedence defaults < file < flags.

    Flag keys may be dotted paths (``train.lr``). Unknown keys and type
    mismatches raise :class:`ConfigError` naming the key path.
    """
    resolved = copy.deepcopy(defaults)
    if file is not None:
        try:
            data = json.loads(Path(file).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{file}: malformed JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{file}: top level must be an object")
        _merge(resolved, data)
    for dotted, value in (flags or {}).items():
        nested: dict = {}
        cur = nested
        parts = dotted.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        _merge(resolved, nested)
    return resolved


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------- manifest


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: Path, command: str, config: dict, seeds: dict, artifacts: Sequence[Path],
                   inputs: Sequence[Path] = (), wall_time_s: float | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256(p) for p in inputs},
        "artifacts": {Path(p).name: sha256(p) for p in artifacts},
    }
    if wall_time_s is not None:
        manifest["wall_time_s"] = round(wall_time_s, 3)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_beside(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def worker_cap() -> int:
    raw = os.environ.get("PFC_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"PFC_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"PFC_THREADS must be a positive integer, got {raw!r}")
    return value


# ---------------------------------------------------------------- commands


def cmd_train(args, cfg: dict) -> None:
    from .model import ModelConfig
    from .prior import PriorConfig
    from .training import TrainConfig, train_loop

    out = Path(args.out)
    model_cfg = ModelConfig.from_dict(cfg["model"])
    prior = PriorConfig.from_dict(cfg["prior"])
    train = TrainConfig.from_dict(cfg["train"])
    t0 = time.perf_counter()
    train_loop(train, prior, model_cfg, out_dir=out)
    artifacts = sorted(out.glob("*.pfc")) + [out / "train_log.csv"]
    write_manifest(out / "manifest.json", "train", cfg, {"train": train.seed, "prior": prior.seed}, artifacts,
                   wall_time_s=time.perf_counter() - t0)


def _read_context(path, n: int) -> tuple[np.ndarray, np.ndarray]:
    idx, labels = [], []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and rows[0][0].strip().lower() == "index":
        rows = rows[1:]
    for line, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise InputError(f"{path}:{line}: expected 'index,label'")
        try:
            idx.append(int(row[0]))
            labels.append(int(row[1]))
        except ValueError:
            raise InputError(f"{path}:{line}: non-integer index or label")
    idx_arr = np.asarray(idx, dtype=np.intp)
    if idx_arr.size and (idx_arr.min() < 0 or idx_arr.max() >= n):
        raise InputError(f"{path}: context index outside [0, {n})")
    return idx_arr, np.asarray(labels, dtype=np.int64)


def write_cluster_csv(path, labels: np.ndarray, proba: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label"] + [f"p{c}" for c in range(proba.shape[1])])
        for i, (lab, row) in enumerate(zip(labels, proba)):
            w.writerow([i, int(lab)] + [f"{p:.6f}" for p in row])


def cmd_cluster(args, cfg: dict) -> None:
    from .data import load_points
    from .inference import ClusterContext, cluster_unsupervised, cluster_with_context
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    data = load_points(args.data)
    C = cfg["clusters"]
    if C is None:
        raise ConfigError("cluster count is required (--clusters)")
    inputs = [Path(args.model), Path(args.data)]
    if args.context:
        idx, labels = _read_context(args.context, data.n)
        inputs.append(Path(args.context))
        result = cluster_with_context(model, data.X, ClusterContext(idx, labels, C), cfg["chunk_size"])
    else:
        result = cluster_unsupervised(model, data.X, C, cfg["rounds"], cfg["m"], chunk_size=cfg["chunk_size"])
    out = Path(args.out)
    write_cluster_csv(out, result.labels, result.proba)
    seeds = {} if result.seeds_used is None else {"bootstrap_seeds": [int(s) for s in result.seeds_used]}
    write_manifest(_manifest_beside(out), "cluster", cfg, seeds, [out], inputs)


def cmd_bench(args, cfg: dict) -> None:
    from .bench import SuiteConfig, run_suite, suite_grid, write_bench_csv
    from .model import load_checkpoint

    suite_cfg = dict(cfg)
    suite_cfg["workers"] = min(cfg["workers"], worker_cap()) if "PFC_THREADS" in os.environ else cfg["workers"]
    suite = SuiteConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in suite_cfg.items()})
    model = load_checkpoint(args.model) if "pfn" in suite.algorithms else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = run_suite(suite, model)
    write_bench_csv(records, out / "bench.csv")
    artifacts = [out / "bench.csv"]
    if args.svg:
        suite_grid(records, suite, out / "suite.svg")
        artifacts.append(out / "suite.svg")
    inputs = [Path(args.model)] if model is not None else []
    write_manifest(out / "manifest.json", "bench", cfg, {"seeds": list(suite.seeds)}, artifacts, inputs)


def cmd_sweep(args, cfg: dict) -> None:
    from .bench import k_sweep, resolve_dataset, write_sweep_csv
    from .data import TOY_KINDS, load_points
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    inputs = [Path(args.model)]
    if cfg["dataset"] in TOY_KINDS:
        ds = resolve_dataset(cfg["dataset"], cfg["n"], 0)
    else:
        ds = load_points(cfg["dataset"])
        inputs.append(Path(cfg["dataset"]))
        if ds.true_labels is None:
            raise InputError(f"{cfg['dataset']}: a sweep needs a label column")
    out = Path(args.out)
    write_sweep_csv(k_sweep(model, ds, cfg["ks"], cfg["seeds"]), out)
    write_manifest(_manifest_beside(out), "sweep", cfg, {"seeds": cfg["seeds"]}, [out], inputs)


def cmd_stability(args, cfg: dict) -> None:
    from .bench import stability_probe, write_stability_csv
    from .model import load_checkpoint
    from .prior import PriorConfig

    model = load_checkpoint(args.model)
    prior = PriorConfig.from_dict(cfg["prior"])
    report = stability_probe(model, prior, cfg["ks"], cfg["probes_per_k"], cfg["queries"])
    out = Path(args.out)
    write_stability_csv(report, out)
    log.info("fitted log-log slope %.4f, intercept %.4f", report.slope, report.intercept)
    write_manifest(_manifest_beside(out), "stability", cfg, {"prior": prior.seed}, [out], [Path(args.model)])


def cmd_gen_data(args, cfg: dict) -> None:
    from .bench import mnist_files
    from .data import ToySpec, gen_toy, load_mnist_idx, mnist_protocol, write_dataset_csv, write_matrix

    out = Path(args.out)
    inputs = []
    if cfg["kind"] == "mnist":
        if not args.mnist_dir:
            raise ConfigError("kind 'mnist' needs --mnist-dir")
        images, labels = mnist_files(args.mnist_dir)
        inputs = [images, labels]
        ds = mnist_protocol(load_mnist_idx(images, labels), cfg["n"], 16, cfg["seed"])
    else:
        ds = gen_toy(ToySpec(cfg["kind"], n=cfg["n"], noise=cfg["noise"], seed=cfg["seed"]))
    if out.suffix == ".bin":
        write_matrix(out, ds.X)
    else:
        write_dataset_csv(ds, out)
    write_manifest(_manifest_beside(out), "gen-data", cfg, {"data": cfg["seed"]}, [out], inputs)


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfc", description="In-context clustering with a prior-fitted transformer.")
    parser.add_argument("--version", action="version", version=f"pfc {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, model=True):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                       help="override any config key (dotted path, JSON value)")
        if model:
            p.add_argument("--model", required=True, help="checkpoint file, or 'default' for the shipped model")

    p = sub.add_parser("train", help="train a model on the synthetic prior")
    common(p, model=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="training stream seed")

    p = sub.add_parser("cluster", help="cluster a data file")
    common(p)
    p.add_argument("--data", required=True, help="CSV or binary matrix of points")
    p.add_argument("--context", help="CSV 'index,label' of anchors; omit for the unsupervised mode")
    p.add_argument("--clusters", type=int, help="number of clusters C")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("bench", help="run the toy-suite benchmark")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--mnist-dir", help="directory holding MNIST idx files (adds the mnist dataset)")
    p.add_argument("--svg", action="store_true", help="also write a scatter grid")

    p = sub.add_parser("sweep", help="V-measure as a function of the number of anchors")
    common(p)
    p.add_argument("--dataset", help="toy dataset name or labelled data file")
    p.add_argument("--ks", type=_int_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("stability", help="one-sample swap stability probe")
    common(p)
    p.add_argument("--ks", type=_int_list)
    p.add_argument("--probes", type=int)
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("gen-data", help="write a toy or projected MNIST dataset")
    common(p, model=False)
    p.add_argument("--kind", help="circles, moons, blobs, aniso, varied, uniform or mnist")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mnist-dir")
    p.add_argument("--out", required=True, help="output file (.csv, or .bin for the binary matrix format)")
    return parser


FLAG_KEYS = {
    "train": {"steps": "train.steps", "lr": "train.lr", "seed": "train.seed"},
    "cluster": {"clusters": "clusters", "chunk_size": "chunk_size"},
    "bench": {"seeds": "seeds"},
    "sweep": {"dataset": "dataset", "ks": "ks", "seeds": "seeds"},
    "stability": {"ks": "ks", "probes": "probes_per_k"},
    "gen-data": {"kind": "kind", "n": "n", "seed": "seed"},
}

COMMANDS = {"train": cmd_train, "cluster": cmd_cluster, "bench": cmd_bench, "sweep": cmd_sweep,
            "stability": cmd_stability, "gen-data": cmd_gen_data}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        flags = {path: getattr(args, attr) for attr, path in FLAG_KEYS[args.command].items()
                 if getattr(args, attr, None) is not None}
        flags.update(_parse_set(args.set))
        if args.command == "bench" and args.mnist_dir:
            flags["mnist_dir"] = args.mnist_dir
        cfg = resolve_config(_defaults()[args.command], args.config, flags)
        if getattr(args, "model", None) == "default":
            from .model import DEFAULT_CHECKPOINT
            args.model = str(DEFAULT_CHECKPOINT)
        if args.command == "bench" and args.mnist_dir and "mnist" not in cfg["datasets"]:
            cfg["datasets"] = list(cfg["datasets"]) + ["mnist"]
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PfcError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
