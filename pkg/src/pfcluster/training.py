"""Offline training on the synthetic task stream (cross-entropy over queries).

Optimizer: Adam with global-norm clipping, linear warmup then cosine decay to
a tenth of the base learning rate.
"""
from __future__ import annotations

import csv
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, InputError, NumericError
from .inference import standardize
from .model import ModelConfig, PfnModel, embed_tokens, forward_packed, pad_features, predict_proba, save_checkpoint
from .prior import PriorConfig, SyntheticTask, gmm_posterior, sample_stream_task

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
EVAL_SEED_OFFSET = 7919
LOG_HEADER = ["step", "train_loss", "eval_loss", "tv_to_oracle"]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    tasks_per_step: int = 8
    lr: float = 1e-3
    warmup_steps: int = 500
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 500
    eval_tasks: int = 64
    checkpoint_every: int = 0
    max_queries: int = 128

    def __post_init__(self):
        if min(self.steps, self.warmup_steps, self.checkpoint_every, self.max_queries) < 0:
            raise ConfigError("TrainConfig: steps, warmup_steps, checkpoint_every and max_queries must be >= 0")
        for name in ("tasks_per_step", "eval_every", "eval_tasks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"TrainConfig.{name} must be >= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("TrainConfig: lr and clip_norm must be > 0")
        if self.warmup_steps > max(self.steps, 0) and self.steps > 0:
            raise ConfigError("TrainConfig.warmup_steps must not exceed steps")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- batching


@dataclass
class PackedBatch:
    X_pad: np.ndarray
    label_idx: np.ndarray
    segments: list[tuple[int, int, int]]
    targets: np.ndarray
    n_classes: np.ndarray


def pack_tasks(tasks: Sequence[SyntheticTask], cfg: ModelConfig, dtype) -> PackedBatch:
    """Concatenate tasks context-first; context rows carry their labels."""
    xs, idx, segments, targets, n_classes = [], [], [], [], []
    start = 0
    for t in tasks:
        C = t.n_clusters
        if C > cfg.c_max:
            raise InputError(f"task has {C} clusters > c_max={cfg.c_max}")
        X, y, k = t.ordered()
        X_std, _ = standardize(X)
        xs.append(pad_features(X_std, cfg.d_max, dtype))
        lab = np.full(t.n, cfg.c_max, dtype=np.intp)
        lab[:k] = y[:k]
        idx.append(lab)
        segments.append((start, t.n, k))
        targets.append(y[k:])
        n_classes.append(np.full(t.n - k, C))
        start += t.n
    return PackedBatch(np.concatenate(xs), np.concatenate(idx), segments,
                       np.concatenate(targets), np.concatenate(n_classes))


def batch_logits(model: PfnModel, batch: PackedBatch) -> nk.Tensor:
    tokens = embed_tokens(model, batch.X_pad, batch.label_idx)
    return forward_packed(model, tokens, batch.segments)


def loss_batch(model: PfnModel, tasks: Sequence[SyntheticTask] | PackedBatch) -> nk.Tensor:
    """Mean over all query tokens of ``-log q(c_true | x, context)``."""
    batch = tasks if isinstance(tasks, PackedBatch) else pack_tasks(tasks, model.config, model.dtype)
    loss = nk.cross_entropy(batch_logits(model, batch), batch.targets, batch.n_classes)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite training loss")
    return loss


# --------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, model: PfnModel) -> "AdamState":
        return cls(0, {k: np.zeros_like(t.data) for k, t in model.params.items()},
                   {k: np.zeros_like(t.data) for k, t in model.params.items()})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr``, then cosine decay to ``0.1 * lr`` at the last step."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads, norm


def adam_update(model: PfnModel, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, p in model.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data -= update.astype(p.dtype, copy=False)


def train_step(model: PfnModel, batch, state: AdamState, cfg: TrainConfig) -> float:
    """One clipped Adam step in place; returns the pre-update batch loss."""
    with nk.Tape() as tape:
        loss = loss_batch(model, batch)
    grads = nk.grad_map(tape, loss, model.params)
    grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        raise NumericError(f"non-finite gradient at step {state.step} in {bad[:5]}")
    adam_update(model, grads, state, lr_at(state.step, cfg))
    return float(loss.data)


# -------------------------------------------------------------- evaluation


def eval_tasks(cfg: TrainConfig, prior: PriorConfig) -> list[SyntheticTask]:
    """Fixed held-out unwarped tasks (the posterior reference is exact there)."""
    unwarped = PriorConfig(**{**asdict(prior), "warp_prob": 0.0})
    root = cfg.seed + EVAL_SEED_OFFSET
    return [sample_stream_task(root, i, unwarped) for i in range(cfg.eval_tasks)]


def tv_to_oracle(model: PfnModel, tasks: Sequence[SyntheticTask]) -> float:
    """Mean (over tasks) of the mean total-variation distance to the exact posterior."""
    tvs = []
    for t in tasks:
        batch = pack_tasks([t], model.config, model.dtype)
        proba = predict_proba(batch_logits(model, batch), t.n_clusters)
        q_idx = t.query_idx()
        ref = gmm_posterior(t.hypothesis, t.latent[q_idx])
        tvs.append(0.5 * np.abs(proba - ref).sum(axis=1).mean())
    return float(np.mean(tvs))


def evaluate(model: PfnModel, tasks: Sequence[SyntheticTask]) -> tuple[float, float]:
    losses = [float(loss_batch(model, [t]).data) for t in tasks]
    return float(np.mean(losses)), tv_to_oracle(model, tasks)


# --------------------------------------------------------------------- loop


def trim_queries(task: SyntheticTask, max_queries: int, rng: np.random.Generator) -> SyntheticTask:
    """Keep the context and at most ``max_queries`` uniformly chosen queries."""
    queries = task.query_idx()
    if max_queries <= 0 or queries.size <= max_queries:
        return task
    keep = np.sort(np.concatenate([task.context_idx, rng.choice(queries, max_queries, replace=False)]))
    remap = np.full(task.n, -1, dtype=np.intp)
    remap[keep] = np.arange(keep.size)
    return SyntheticTask(task.X[keep], task.labels[keep], remap[task.context_idx],
                         task.hypothesis, task.latent[keep])


def training_batch(cfg: TrainConfig, prior: PriorConfig, step: int) -> list[SyntheticTask]:
    """The tasks of optimizer step ``step`` (0-based); a pure function of the seeds."""
    tasks = []
    for j in range(cfg.tasks_per_step):
        index = step * cfg.tasks_per_step + j
        task = sample_stream_task(cfg.seed, index, prior)
        tasks.append(trim_queries(task, cfg.max_queries, np.random.default_rng([cfg.seed, index, 1])))
    return tasks


def _batch_producer(cfg: TrainConfig, prior: PriorConfig, model_cfg: ModelConfig, dtype,
                    maxsize: int = 4) -> Iterable[PackedBatch]:
    """Yield packed batches in step order; a worker thread fills a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    stop = threading.Event()

    def work():
        try:
            for step in range(cfg.steps):
                item = pack_tasks(training_batch(cfg, prior, step), model_cfg, dtype)
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    worker = threading.Thread(target=work, daemon=True)
    worker.start()
    try:
        for _ in range(cfg.steps):
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def train_loop(cfg: TrainConfig, prior: PriorConfig, model_cfg: ModelConfig | None = None,
               out_dir=None, model: PfnModel | None = None,
               callback: Callable[[int, dict], None] | None = None) -> tuple[PfnModel, list[dict]]:
    """Train from scratch (or from ``model``); returns the model and the eval log.

    When ``out_dir`` is given, writes ``train_log.csv``, ``model.pfc`` and,
    if ``checkpoint_every`` > 0, periodic ``ckpt_<step>.pfc`` files.
    """
    nk.tune_allocator()
    model_cfg = model_cfg or ModelConfig()
    model = model or PfnModel.init(model_cfg, seed=cfg.seed)
    state = AdamState.zeros(model)
    held_out = eval_tasks(cfg, prior)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    running: list[float] = []

    def record(step: int):
        eval_loss, tv = evaluate(model, held_out)
        row = {"step": step, "train_loss": float(np.mean(running)) if running else None,
               "eval_loss": eval_loss, "tv_to_oracle": tv}
        rows.append(row)
        running.clear()
        log.info("step %d train=%s eval=%.4f tv=%.4f", step, _fmt(row["train_loss"]), eval_loss, tv)
        if callback is not None:
            callback(step, row)

    record(0)
    for step, batch in enumerate(_batch_producer(cfg, prior, model_cfg, model.dtype), start=1):
        try:
            running.append(train_step(model, batch, state, cfg))
        except NumericError as exc:
            raise NumericError(f"{exc} (stream seed {cfg.seed}, tasks {(step - 1) * cfg.tasks_per_step}.."
                               f"{step * cfg.tasks_per_step - 1})") from exc
        if step % cfg.eval_every == 0 or step == cfg.steps:
            record(step)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, out / f"ckpt_{step:06d}.pfc")

    if out is not None:
        write_log(rows, out / "train_log.csv")
        save_checkpoint(model, out / "model.pfc")
    return model, rows


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["step"], _fmt(r["train_loss"]), _fmt(r["eval_loss"]), _fmt(r["tv_to_oracle"])])
