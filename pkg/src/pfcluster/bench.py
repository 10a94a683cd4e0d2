"""Benchmark protocols: toy-suite comparison, k-sweep, stability probe, scatter plots.

Anchors for every PFN row come from :func:`anchor_order`, a per-seed
stratified ordering of the points whose prefixes are the anchor sets, so
smaller-k anchor sets are always contained in larger ones.
"""
from __future__ import annotations

import csv
import io
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import TUNED_DBSCAN, BaselineSpec, tune_dbscan
from .data import TOY_CLUSTERS, TOY_KINDS, Dataset, ToySpec, gen_toy, load_mnist_idx, mnist_protocol
from .errors import ConfigError, InputError
from .inference import ClusterContext, cluster_unsupervised, cluster_with_context
from .metrics import MetricsReport, score, timed
from .model import PfnModel
from .prior import PriorConfig, sample_hypothesis, sample_task

BENCH_HEADER = ["dataset", "algorithm", "params", "k", "seed", "h", "c", "v", "ari", "hung_acc", "time_s"]
SWEEP_HEADER = ["k", "mean_v", "sd_v", "n_seeds"]
STABILITY_HEADER = ["k", "median_diff", "max_diff"]
ALGORITHM_ORDER = ("kmeans", "ward", "dbscan", "pfn")


@dataclass(frozen=True)
class BenchRecord:
    dataset: str
    algorithm: str
    params: str
    k: int
    seed: int
    report: MetricsReport
    labels: np.ndarray | None = field(default=None, compare=False, repr=False)

    def sort_key(self):
        return (self.dataset, ALGORITHM_ORDER.index(self.algorithm), self.k, self.seed)

    def row(self) -> list[str]:
        r = self.report
        return [self.dataset, self.algorithm, self.params, str(self.k), str(self.seed),
                f"{r.homogeneity:.6f}", f"{r.completeness:.6f}", f"{r.v_measure:.6f}",
                f"{r.ari:.6f}", f"{r.hungarian_acc:.6f}", f"{r.wall_time_seconds:.6f}"]


@dataclass(frozen=True)
class SuiteConfig:
    datasets: tuple[str, ...] = TOY_KINDS
    n: int = 2000
    seeds: tuple[int, ...] = (0,)
    algorithms: tuple[str, ...] = ALGORITHM_ORDER
    pfn_ks: tuple[int, ...] = (0, 100)
    timing_repeats: int = 3
    mnist_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        unknown = set(self.algorithms) - set(ALGORITHM_ORDER)
        if unknown:
            raise ConfigError(f"unknown algorithm(s): {sorted(unknown)}")
        if self.timing_repeats < 1 or self.workers < 1:
            raise ConfigError("timing_repeats and workers must be >= 1")
        for name in self.datasets:
            if name not in TOY_KINDS and name != "mnist":
                raise ConfigError(f"unknown dataset {name!r}")
        if "mnist" in self.datasets and not self.mnist_dir:
            raise ConfigError("dataset 'mnist' needs mnist_dir")


# ---------------------------------------------------------------- datasets


def mnist_files(directory) -> tuple[Path, Path]:
    """Locate an images/labels IDX pair (optionally gzipped) in ``directory``."""
    directory = Path(directory)
    found = {}
    for path in sorted(directory.iterdir()):
        name = path.name.lower()
        if "idx3" in name and "images" not in found:
            found["images"] = path
        elif "idx1" in name and "labels" not in found:
            found["labels"] = path
    if len(found) != 2:
        raise InputError(f"no MNIST idx3/idx1 file pair in {directory}")
    return found["images"], found["labels"]


def resolve_dataset(name: str, n: int, seed: int, mnist_dir=None) -> Dataset:
    if name in TOY_KINDS:
        return gen_toy(ToySpec(name, n=n, seed=seed))
    if name == "mnist":
        if mnist_dir is None:
            raise InputError("dataset 'mnist' needs an MNIST directory")
        raw = load_mnist_idx(*mnist_files(mnist_dir))
        out = mnist_protocol(raw, n, 16, seed)
        return Dataset(out.X, out.true_labels, "mnist")
    raise InputError(f"unknown dataset {name!r}")


def n_clusters_of(dataset: Dataset) -> int:
    if dataset.name in TOY_CLUSTERS:
        return TOY_CLUSTERS[dataset.name]
    return int(np.unique(dataset.true_labels).size)


def anchor_order(labels, seed: int) -> np.ndarray:
    """All indices, ordered so that every prefix is as class-balanced as possible.

    Members of each class are shuffled, then the classes are interleaved
    round-robin; classes that run out are skipped.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0xA7])
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    depth = max(p.size for p in pools)
    grid = np.full((depth, len(pools)), -1, dtype=np.intp)
    for j, p in enumerate(pools):
        grid[: p.size, j] = p
    flat = grid.ravel()
    return flat[flat >= 0]


def anchors(labels, k: int, seed: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not 0 <= k < labels.size:
        raise InputError(f"k={k} must lie in [0, n={labels.size})")
    return anchor_order(labels, seed)[:k]


# ---------------------------------------------------------------- suite


def _min_time(run: Callable, repeats: int):
    result, best = timed(run)
    for _ in range(repeats - 1):
        result, t = timed(run)
        best = min(best, t)
    return result, best


def _cells(cfg: SuiteConfig, model: PfnModel | None):
    for name in cfg.datasets:
        for seed in cfg.seeds:
            ds = resolve_dataset(name, cfg.n, seed, cfg.mnist_dir)
            C = n_clusters_of(ds)
            for algo in cfg.algorithms:
                if algo == "pfn":
                    for k in cfg.pfn_ks:
                        yield ds, seed, algo, _pfn_runner(model, ds, C, k, seed)
                else:
                    yield ds, seed, algo, _baseline_runner(ds, C, algo, seed)


def _baseline_runner(ds: Dataset, C: int, algo: str, seed: int):
    if algo == "dbscan":
        eps, min_pts = TUNED_DBSCAN.get(ds.name) or tune_dbscan(ds.X, ds.true_labels)
        spec = BaselineSpec("dbscan", eps=eps, min_pts=min_pts)
    else:
        spec = BaselineSpec(algo, n_clusters=C, seed=seed)
    return spec.params(), 0, lambda: spec.run(ds.X)


def _pfn_runner(model: PfnModel, ds: Dataset, C: int, k: int, seed: int):
    if k == 0:
        return f"C={C};rounds=2;m=10", 0, lambda: cluster_unsupervised(model, ds.X, C).labels
    idx = anchors(ds.true_labels, k, seed)
    ctx = ClusterContext(idx, ds.true_labels[idx], C)

    def run():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # a single-class dataset leaves clusters anchorless
            return cluster_with_context(model, ds.X, ctx).labels

    return f"C={C};anchors=stratified", k, run


def run_suite(cfg: SuiteConfig, model: PfnModel | None = None) -> list[BenchRecord]:
    """Time and score every (dataset, algorithm, k, seed) cell, sorted by that key."""
    if "pfn" in cfg.algorithms and model is None:
        raise InputError("PFN rows need a trained checkpoint")

    def run_cell(cell):
        ds, seed, algo, (params, k, run) = cell
        labels, t = _min_time(run, cfg.timing_repeats)
        return BenchRecord(ds.name, algo, params, k, seed, score(ds.true_labels, labels, t), labels)

    cells = list(_cells(cfg, model))
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            records = list(pool.map(run_cell, cells))
    else:
        records = [run_cell(c) for c in cells]
    return sorted(records, key=BenchRecord.sort_key)


def _write_csv(path, header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def write_bench_csv(records: Sequence[BenchRecord], path=None) -> str:
    return _write_csv(path, BENCH_HEADER, (r.row() for r in records))


# ---------------------------------------------------------------- k sweep


@dataclass(frozen=True)
class SweepRow:
    k: int
    mean_v: float
    sd_v: float
    n_seeds: int


def k_sweep(model: PfnModel, dataset: Dataset, ks: Sequence[int], seeds: Sequence[int]) -> list[SweepRow]:
    """Mean and sd of V-measure per k; anchors for each seed are nested across k."""
    ks = [int(k) for k in ks]
    if not ks or any(b <= a for a, b in zip(ks, ks[1:])):
        raise InputError(f"ks must be strictly ascending, got {ks}")
    if ks[-1] >= dataset.n or ks[0] < 1:
        raise InputError(f"every k must lie in [1, n={dataset.n})")
    C = n_clusters_of(dataset)
    scores = np.empty((len(ks), len(seeds)))
    for j, seed in enumerate(seeds):
        order = anchor_order(dataset.true_labels, seed)
        for i, k in enumerate(ks):
            idx = order[:k]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                labels = cluster_with_context(model, dataset.X, ClusterContext(idx, dataset.true_labels[idx], C)).labels
            scores[i, j] = score(dataset.true_labels, labels).v_measure
    sd = scores.std(axis=1, ddof=1) if len(seeds) > 1 else np.zeros(len(ks))
    return [SweepRow(k, float(m), float(s), len(seeds)) for k, m, s in zip(ks, scores.mean(axis=1), sd)]


def write_sweep_csv(rows: Sequence[SweepRow], path=None) -> str:
    return _write_csv(path, SWEEP_HEADER, ([r.k, f"{r.mean_v:.6f}", f"{r.sd_v:.6f}", r.n_seeds] for r in rows))


# ---------------------------------------------------------------- stability


@dataclass(frozen=True)
class StabilityReport:
    ks: tuple[int, ...]
    median_diff: tuple[float, ...]
    max_diff: tuple[float, ...]
    slope: float
    intercept: float
    diffs: dict = field(default_factory=dict, compare=False, repr=False)


def one_swap_diff(model: PfnModel, X: np.ndarray, ctx_labels: np.ndarray, k: int, C: int,
                  swap: tuple[int, np.ndarray, int] | None) -> float:
    """Sup-norm change of the query probabilities when one context pair is replaced.

    Rows ``[0, k)`` of ``X`` are the context, the rest are held-out queries.
    ``swap`` is ``(position, new_point, new_label)``; ``None`` swaps nothing.
    """
    idx = np.arange(k)

    def proba(Xc, labels):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return cluster_with_context(model, Xc, ClusterContext(idx, labels, C)).proba[k:]

    base = proba(X, ctx_labels)
    if swap is None:
        return 0.0
    j, x_new, y_new = swap
    X2, labels2 = X.copy(), ctx_labels.copy()
    X2[j], labels2[j] = x_new, y_new
    return float(np.abs(proba(X2, labels2) - base).max())


def stability_probe(model: PfnModel, prior: PriorConfig, ks: Sequence[int] = (10, 25, 50, 100, 200),
                    probes_per_k: int = 200, n_queries: int = 32) -> StabilityReport:
    """Finite-k analogue of the one-sample stability bound.

    Each probe draws a hypothesis and a task of ``k + n_queries + 1`` points:
    ``k`` context points, ``n_queries`` held-out queries and one fresh pair
    that replaces a random context pair. A least-squares line through
    ``(log k, log median diff)`` gives the empirical decay slope and intercept.
    """
    ks = tuple(int(k) for k in ks)
    if not ks or any(b <= a for a, b in zip(ks, ks[1:])):
        raise InputError(f"ks must be strictly ascending, got {ks}")
    cfg = model.config
    c_hi = min(prior.c_range[1], cfg.c_max)
    d_hi = min(prior.d_range[1], cfg.d_max)
    medians, maxima, diffs = [], [], {}
    for k in ks:
        if k < prior.c_range[0]:
            raise InputError(f"k={k} is below the prior's minimum cluster count")
        sub = replace(prior, c_range=(prior.c_range[0], min(c_hi, k)), d_range=(prior.d_range[0], d_hi))
        vals = np.empty(probes_per_k)
        for p in range(probes_per_k):
            rng = np.random.default_rng([prior.seed, k, p])
            h = sample_hypothesis(rng, sub)
            task = sample_task(rng, h, k + n_queries + 1, k)
            rest = task.query_idx()
            order = np.concatenate([task.context_idx, rest[:-1]])
            fresh = rest[-1]
            X, y = task.X[order], task.labels[order]
            j = int(rng.integers(k))
            vals[p] = one_swap_diff(model, X, y[:k], k, task.n_clusters, (j, task.X[fresh], task.labels[fresh]))
        diffs[k] = vals
        medians.append(float(np.median(vals)))
        maxima.append(float(vals.max()))
    logs = np.log(np.maximum(medians, 1e-12))
    if len(ks) > 1:
        slope, intercept = np.polyfit(np.log(ks), logs, 1)
    else:
        slope, intercept = 0.0, float(logs[0])
    return StabilityReport(ks, tuple(medians), tuple(maxima), float(slope), float(intercept), diffs)


def write_stability_csv(report: StabilityReport, path=None) -> str:
    rows = ([k, f"{m:.6g}", f"{x:.6g}"] for k, m, x in zip(report.ks, report.median_diff, report.max_diff))
    return _write_csv(path, STABILITY_HEADER, rows)


# ---------------------------------------------------------------- SVG

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
NOISE_COLOR = "#bbbbbb"
PANEL = 240
MARGIN = 12


def _panel(X: np.ndarray, labels: np.ndarray, title: str, x0: int, y0: int) -> list[str]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 2:
        raise InputError(f"scatter plots need 2-D points, got shape {X.shape}; project first")
    labels = np.asarray(labels)
    if labels.shape[0] != X.shape[0]:
        raise InputError("labels and points differ in length")
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    inner = PANEL - 2 * MARGIN
    px = x0 + MARGIN + (X[:, 0] - lo[0]) / span[0] * inner
    py = y0 + MARGIN + (1.0 - (X[:, 1] - lo[1]) / span[1]) * inner
    out = [f'<g><rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="white" stroke="#cccccc"/>']
    for x, y, lab in zip(px, py, labels):
        color = NOISE_COLOR if lab < 0 else PALETTE[int(lab) % len(PALETTE)]
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.6" fill="{color}"/>')
    out.append(f'<text x="{x0 + 6}" y="{y0 + PANEL - 4}" font-size="11" font-family="sans-serif">{title}</text></g>')
    return out


def _document(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def emit_scatter_svg(dataset: Dataset, labels, path=None, algorithm: str = "", v: float | None = None) -> str:
    """One panel of ``dataset`` colored by ``labels``; the caption holds the algorithm and V."""
    title = " ".join(s for s in (algorithm, None if v is None else f"V={v:.3f}") if s)
    svg = _document(PANEL, PANEL, _panel(dataset.X, labels, title, 0, 0))
    if path is not None:
        Path(path).write_text(svg)
    return svg


def emit_grid_svg(panels: Sequence[Sequence[tuple[Dataset, np.ndarray, str]]], path=None) -> str:
    """Grid of panels: one row per dataset, one column per algorithm."""
    body = []
    cols = max(len(r) for r in panels)
    for i, row in enumerate(panels):
        for j, (ds, labels, title) in enumerate(row):
            body += _panel(ds.X, labels, title, j * PANEL, i * PANEL)
    svg = _document(cols * PANEL, len(panels) * PANEL, body)
    if path is not None:
        Path(path).write_text(svg)
    return svg


def suite_grid(records: Sequence[BenchRecord], cfg: SuiteConfig, path=None) -> str:
    """Scatter grid of the first seed of a suite run (2-D datasets only)."""
    rows = []
    for name in cfg.datasets:
        if name == "mnist":
            continue
        seed = cfg.seeds[0]
        ds = resolve_dataset(name, cfg.n, seed)
        row = [(ds, r.labels, f"{r.algorithm}{'' if r.algorithm != 'pfn' else f' k={r.k}'} V={r.report.v_measure:.3f}")
               for r in records if r.dataset == name and r.seed == seed and r.labels is not None]
        rows.append(row)
    return emit_grid_svg(rows, path)
