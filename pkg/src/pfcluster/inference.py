"""Clustering real data with a trained model.

Given anchor points with known cluster labels, every other point is labeled
by one pass of the encoder: queries attend to the anchors and to themselves,
so they can be processed in arbitrary chunks with bit-identical results.

With no anchors at all (:func:`cluster_unsupervised`) a deterministic
bootstrap picks one seed per cluster by farthest-point sampling and then
refines the context with the most confident points of each cluster. This
bootstrap is a design choice of this package, not a learned behaviour.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DegenerateInputError, InputError
from .model import PfnModel, embed_tokens, encode_context, forward_queries, pad_features, predict_proba

MAX_TOKENS = 512


@dataclass
class ClusterContext:
    """Anchor rows of ``X`` with their labels, and the declared cluster count."""

    idx: np.ndarray
    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=np.intp).ravel()
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.idx.shape != self.labels.shape:
            raise InputError("context indices and labels differ in length")
        if self.n_clusters < 1:
            raise InputError(f"cluster count must be >= 1, got {self.n_clusters}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_clusters):
            raise InputError(f"context label outside [0, {self.n_clusters})")
        if np.unique(self.idx).size != self.idx.size:
            raise InputError("context indices must be distinct")

    @property
    def k(self) -> int:
        return self.idx.size


@dataclass
class ClusterResult:
    labels: np.ndarray
    proba: np.ndarray
    seeds_used: np.ndarray | None = None
    wall_time: float = 0.0
    context: ClusterContext | None = None


def standardize(X, floor: float = 1e-8):
    """Per-feature z-score; returns the transformed matrix and ``(mean, std)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise InputError(f"standardize needs a non-empty 2-D matrix, got shape {X.shape}")
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), floor)
    return (X - mean) / std, (mean, std)


def _query_proba(model: PfnModel, X_std: np.ndarray, ctx: ClusterContext, queries: np.ndarray,
                 chunk_size: int) -> np.ndarray:
    """Probabilities for ``queries``: the context is encoded once, then one pass per chunk."""
    cfg = model.config
    pad = pad_features(X_std, cfg.d_max, model.dtype)
    cache = encode_context(model, embed_tokens(model, pad[ctx.idx], ctx.labels))
    out = np.empty((queries.size, ctx.n_clusters))
    for lo in range(0, queries.size, chunk_size):
        q = queries[lo: lo + chunk_size]
        tokens = embed_tokens(model, pad[q], np.full(q.size, cfg.c_max))
        out[lo: lo + q.size] = predict_proba(forward_queries(model, cache, tokens), ctx.n_clusters, cfg.c_max)
    return out


def cluster_with_context(model: PfnModel, X, ctx: ClusterContext, chunk_size: int | None = None) -> ClusterResult:
    """Label every row of ``X`` from the anchors in ``ctx``."""
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"expected a 2-D data matrix, got shape {X.shape}")
    n, d = X.shape
    cfg = model.config
    C, k = ctx.n_clusters, ctx.k
    if C > cfg.c_max:
        raise InputError(f"{C} clusters exceeds the model's c_max={cfg.c_max}")
    if d > cfg.d_max:
        raise InputError(f"feature dimension {d} exceeds d_max={cfg.d_max}; project first")
    if k >= n:
        raise InputError(f"context size k={k} must be smaller than n={n}")
    if k and ctx.idx.max() >= n:
        raise InputError("context index out of range")
    if k >= MAX_TOKENS:
        raise InputError(f"context size k={k} leaves no room for queries in {MAX_TOKENS} tokens")
    limit = MAX_TOKENS - k
    chunk_size = limit if chunk_size is None else chunk_size
    if not 1 <= chunk_size <= limit:
        raise InputError(f"chunk_size must lie in [1, {limit}]")
    missing = np.setdiff1d(np.arange(C), ctx.labels)
    if missing.size and C > 1:
        warnings.warn(f"clusters {missing.tolist()} have no anchor in the context", stacklevel=2)

    queries = np.setdiff1d(np.arange(n), ctx.idx)
    proba = np.zeros((n, C))
    if C == 1:
        proba[:] = 1.0
    else:
        X_std, _ = standardize(X)
        proba[queries] = _query_proba(model, X_std, ctx, queries, chunk_size)
        proba[ctx.idx] = 0.0
        proba[ctx.idx, ctx.labels] = 1.0
    labels = proba.argmax(axis=1)
    labels[ctx.idx] = ctx.labels
    return ClusterResult(labels, proba, None, time.perf_counter() - t0, ctx)


def farthest_point_seeds(X_std: np.ndarray, C: int) -> np.ndarray:
    """First seed farthest from the mean, then greedy max-min distance; ties to lowest index."""
    center = X_std.mean(axis=0)
    dist = np.sqrt(((X_std - center) ** 2).sum(axis=1))
    if dist.max() == 0.0:
        raise DegenerateInputError("all points are identical; farthest-point sampling is undefined")
    seeds = [int(np.argmax(dist))]
    min_d = np.sqrt(((X_std - X_std[seeds[0]]) ** 2).sum(axis=1))
    for _ in range(1, C):
        nxt = int(np.argmax(min_d))
        if min_d[nxt] == 0.0:
            raise DegenerateInputError(f"fewer than {C} distinct points; cannot pick {C} seeds")
        seeds.append(nxt)
        min_d = np.minimum(min_d, np.sqrt(((X_std - X_std[nxt]) ** 2).sum(axis=1)))
    return np.asarray(seeds, dtype=np.intp)


def _confident_context(result: ClusterResult, C: int, m: int) -> ClusterContext:
    n = result.labels.size
    m = max(1, min(m, (n - 1) // C))
    chosen: list[np.ndarray] = []
    taken = np.zeros(n, dtype=bool)
    for c in range(C):
        members = np.flatnonzero((result.labels == c) & ~taken)
        if members.size == 0:
            members = np.flatnonzero(~taken)
        order = np.argsort(-result.proba[members, c], kind="stable")
        pick = members[order[:m]]
        taken[pick] = True
        chosen.append(pick)
    idx = np.concatenate(chosen)
    labels = np.concatenate([np.full(p.size, c) for c, p in enumerate(chosen)])
    return ClusterContext(idx, labels, C)


def cluster_unsupervised(model: PfnModel, X, C: int, rounds: int = 2, m: int = 10,
                         chunk_size: int | None = None) -> ClusterResult:
    """Cluster without anchors via farthest-point seeding plus confidence refinement."""
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"expected a 2-D data matrix, got shape {X.shape}")
    n = X.shape[0]
    if C < 2:
        raise InputError(f"unsupervised mode needs C >= 2, got {C}")
    if n < C:
        raise InputError(f"n={n} is smaller than C={C}")
    if rounds < 0 or m < 1:
        raise InputError("rounds must be >= 0 and m >= 1")
    X_std, _ = standardize(X)
    seeds = farthest_point_seeds(X_std, C)
    if n == C:
        labels = np.empty(n, dtype=np.int64)
        labels[seeds] = np.arange(C)
        proba = np.eye(C)[labels]
        ctx = ClusterContext(seeds, np.arange(C), C)
        return ClusterResult(labels, proba, seeds, time.perf_counter() - t0, ctx)
    result = cluster_with_context(model, X, ClusterContext(seeds, np.arange(C), C), chunk_size)
    for _ in range(rounds):
        result = cluster_with_context(model, X, _confident_context(result, C, m), chunk_size)
    result.seeds_used = seeds
    result.wall_time = time.perf_counter() - t0
    return result


# ----------------------------------------------------------------- estimator


def _resolve_model(model) -> PfnModel:
    from .model import load_checkpoint

    if isinstance(model, PfnModel):
        return model
    if model is None:
        raise InputError("PFNClusterer needs a trained model or a checkpoint path")
    return load_checkpoint(model)


class PFNClusterer(ClusterMixin, BaseEstimator):
    """Scikit-learn style wrapper.

    ``fit(X, y)`` treats entries of ``y`` equal to ``-1`` as unlabeled, the
    usual semi-supervised convention; the labeled rows become the anchors.
    With ``y=None`` (or no labeled rows) the anchor-free bootstrap is used.
    After fitting, ``predict`` labels new points against the final anchors.

    Parameters
    ----------
    model : PfnModel or path
        Trained model or checkpoint file.
    n_clusters : int, optional
        Declared number of clusters. Inferred from ``y`` when omitted.
    rounds, m : int
        Refinement passes and points per cluster for the anchor-free mode.
    chunk_size : int, optional
        Queries per forward segment (defaults to the token budget).
    """

    def __init__(self, model=None, n_clusters=None, rounds=2, m=10, chunk_size=None):
        self.model = model
        self.n_clusters = n_clusters
        self.rounds = rounds
        self.m = m
        self.chunk_size = chunk_size

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        model = _resolve_model(self.model)
        labeled = np.zeros(X.shape[0], dtype=bool)
        if y is not None:
            y = np.asarray(y, dtype=np.int64).ravel()
            if y.shape[0] != X.shape[0]:
                raise InputError("y must have one entry per row of X")
            labeled = y >= 0
        C = self.n_clusters
        if C is None:
            if not labeled.any():
                raise InputError("n_clusters is required when no labeled rows are given")
            C = int(y[labeled].max()) + 1
        if labeled.any():
            ctx = ClusterContext(np.flatnonzero(labeled), y[labeled], C)
            result = cluster_with_context(model, X, ctx, self.chunk_size)
        else:
            result = cluster_unsupervised(model, X, C, self.rounds, self.m, self.chunk_size)
        self.model_ = model
        self.n_clusters_ = C
        self.result_ = result
        self.labels_ = result.labels
        self.anchors_ = X[result.context.idx]
        self.anchor_labels_ = result.context.labels
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64)
        k = self.anchors_.shape[0]
        joint = np.vstack([self.anchors_, X])
        ctx = ClusterContext(np.arange(k), self.anchor_labels_, self.n_clusters_)
        res = cluster_with_context(self.model_, joint, ctx, self.chunk_size)
        return res.proba[k:]

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
