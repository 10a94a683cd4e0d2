"""Synthetic clustering tasks from a warped Gaussian-mixture prior.

A hypothesis is a Gaussian mixture (weights, means, Cholesky factors of the
covariances) whose components are grouped into clusters, plus an optional warp: a rotation followed by a per-coordinate
monotone map. Tasks are drawn from a hypothesis, their labels are randomly
permuted, and a context subset covering every present cluster is chosen.
:func:`gmm_posterior` evaluates the exact per-hypothesis responsibilities in
the unwarped space; it is the reference the trained model is scored against.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, InputError

WARP_MAPS = ("ssqrt", "asinh", "identity")
MAX_CONDITION = 50.0
SUBCOMPONENTS_MAX = 3
SUBCOMPONENT_STEP = (1.5, 3.0)   # in units of the cluster's covariance scale
COVERAGE_TRIES = 100


@dataclass(frozen=True)
class PriorConfig:
    c_range: tuple[int, int] = (2, 10)
    d_range: tuple[int, int] = (1, 16)
    n_range: tuple[int, int] = (64, 512)
    sep_scale: tuple[float, float] = (1.0, 1.0)
    cov_scale: tuple[float, float] = (0.05, 0.6)
    warp_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("c_range", "d_range", "n_range", "sep_scale", "cov_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"PriorConfig.{name} is empty: {lo} > {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.c_range[0] < 1 or self.d_range[0] < 1 or self.n_range[0] < 2:
            raise ConfigError("PriorConfig ranges must be positive (n >= 2)")
        if self.sep_scale[0] <= 0 or self.cov_scale[0] <= 0:
            raise ConfigError("PriorConfig scales must be > 0")
        if not 0.0 <= self.warp_prob <= 1.0:
            raise ConfigError(f"PriorConfig.warp_prob must lie in [0, 1], got {self.warp_prob}")

    def to_json(self) -> str:
        d = asdict(self)
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown prior config key(s): {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def from_json(cls, text: str) -> "PriorConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class GmmHypothesis:
    """Gaussian mixture whose components are grouped into clusters.

    ``component_labels[j]`` is the cluster of component ``j``; when omitted
    every component is its own cluster.
    """

    weights: np.ndarray                    # (M,) component weights
    means: np.ndarray                      # (M, d)
    cov_factors: np.ndarray                # (M, d, d), lower triangular
    rotation: np.ndarray | None = None     # (d, d) orthonormal, None = no warp
    warp_maps: tuple[str, ...] = ()
    component_labels: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.component_labels is None:
            self.component_labels = np.arange(self.weights.shape[0])
        self.component_labels = np.asarray(self.component_labels, dtype=np.intp)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def n_clusters(self) -> int:
        return int(self.component_labels.max()) + 1

    @property
    def cluster_weights(self) -> np.ndarray:
        return np.bincount(self.component_labels, weights=self.weights, minlength=self.n_clusters)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def warped(self) -> bool:
        return self.rotation is not None

    def apply_warp(self, X: np.ndarray) -> np.ndarray:
        if self.rotation is None:
            return X
        Y = X @ self.rotation.T
        for j, tag in enumerate(self.warp_maps):
            if tag == "ssqrt":
                Y[:, j] = np.sign(Y[:, j]) * np.sqrt(np.abs(Y[:, j]))
            elif tag == "asinh":
                Y[:, j] = np.arcsinh(Y[:, j])
        return Y

    def permuted(self, perm: np.ndarray) -> "GmmHypothesis":
        """Relabel clusters so that old cluster ``c`` becomes ``perm[c]``."""
        return GmmHypothesis(self.weights, self.means, self.cov_factors, self.rotation,
                             self.warp_maps, np.asarray(perm)[self.component_labels])


@dataclass
class SyntheticTask:
    X: np.ndarray                 # (n, d), warped when the hypothesis is
    labels: np.ndarray            # (n,) in [0, C)
    context_idx: np.ndarray       # (k,) distinct indices into X
    hypothesis: GmmHypothesis
    latent: np.ndarray = field(repr=False, default=None)  # pre-warp points

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.context_idx.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.hypothesis.n_clusters

    def query_idx(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.context_idx] = False
        return np.flatnonzero(mask)

    def ordered(self) -> tuple[np.ndarray, np.ndarray, int]:
        """Points and labels reordered context-first, plus k."""
        order = np.concatenate([self.context_idx, self.query_idx()])
        return self.X[order], self.labels[order], self.k


def _log_uniform(rng: np.random.Generator, lo: float, hi: float, size=None):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def _orthonormal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _random_factor(rng: np.random.Generator, d: int, scale: float) -> np.ndarray:
    # eigenvalue ratios within [1/MAX_CONDITION, 1] keep cond(Sigma) <= 50
    eig = scale**2 * np.exp(rng.uniform(-np.log(MAX_CONDITION), 0.0, d))
    q = _orthonormal(rng, d)
    sigma = (q * eig) @ q.T
    return np.linalg.cholesky((sigma + sigma.T) / 2)


def sample_hypothesis(rng: np.random.Generator, cfg: PriorConfig) -> GmmHypothesis:
    """Draw cluster count, dimension, weights, means, covariances and warp.

    Each cluster is a chain of 1 to SUBCOMPONENTS_MAX Gaussians: the first sits
    at a random center, each next one a few cluster-widths from the previous,
    which yields elongated and bent clusters.
    """
    C = int(rng.integers(cfg.c_range[0], cfg.c_range[1] + 1))
    d = int(rng.integers(cfg.d_range[0], cfg.d_range[1] + 1))
    cluster_w = rng.dirichlet(np.ones(C))
    sep = _log_uniform(rng, *cfg.sep_scale)
    weights, means, factors, owner = [], [], [], []
    for c in range(C):
        scale = _log_uniform(rng, *cfg.cov_scale)
        parts = int(rng.integers(1, SUBCOMPONENTS_MAX + 1))
        center = rng.normal(0.0, sep, d)
        for w in cluster_w[c] * rng.dirichlet(np.ones(parts)):
            weights.append(w)
            means.append(center)
            factors.append(_random_factor(rng, d, scale))
            owner.append(c)
            step = rng.normal(size=d)
            center = center + step / np.linalg.norm(step) * scale * rng.uniform(*SUBCOMPONENT_STEP)
    rotation, maps = None, ()
    if rng.uniform() < cfg.warp_prob:
        rotation = _orthonormal(rng, d)
        maps = tuple(WARP_MAPS[i] for i in rng.integers(0, len(WARP_MAPS), d))
    return GmmHypothesis(np.asarray(weights), np.asarray(means), np.asarray(factors),
                         rotation, maps, np.asarray(owner))


def _choose_context(rng: np.random.Generator, labels: np.ndarray, k: int) -> np.ndarray:
    n = labels.shape[0]
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    present = np.unique(labels)
    if k < present.size:
        raise ConfigError(f"context of size {k} cannot cover {present.size} clusters")
    for _ in range(COVERAGE_TRIES):
        idx = rng.choice(n, size=k, replace=False)
        if np.unique(labels[idx]).size == present.size:
            return idx.astype(np.intp)
    # rare clusters: seed one member per cluster, fill the rest uniformly
    seeds = np.array([rng.choice(np.flatnonzero(labels == c)) for c in present])
    rest = np.setdiff1d(np.arange(n), seeds)
    fill = rng.choice(rest, size=k - seeds.size, replace=False)
    return rng.permutation(np.concatenate([seeds, fill])).astype(np.intp)


def sample_task(rng: np.random.Generator, h: GmmHypothesis, n: int, k: int) -> SyntheticTask:
    if not 0 <= k < n:
        raise InputError(f"sample_task needs 0 <= k < n (got n={n}, k={k})")
    M, d = h.n_components, h.dim
    active = np.flatnonzero(h.weights > 0)
    if n < active.size:
        raise InputError(f"n={n} too small for {active.size} active components")
    # every component with positive weight gets at least one point
    counts = np.zeros(M, dtype=np.int64)
    counts[active] = 1 + rng.multinomial(n - active.size, h.weights[active] / h.weights[active].sum())
    comp = rng.permutation(np.repeat(np.arange(M), counts))
    z = rng.normal(size=(n, d))
    latent = h.means[comp] + np.einsum("nij,nj->ni", h.cov_factors[comp], z)
    perm = rng.permutation(h.n_clusters)
    hyp = h.permuted(perm)
    labels = hyp.component_labels[comp]
    context = _choose_context(rng, labels, k)
    X = hyp.apply_warp(latent.copy())
    return SyntheticTask(X, labels.astype(np.int64), context, hyp, latent)


def gmm_posterior(h: GmmHypothesis, x: np.ndarray) -> np.ndarray:
    """Cluster responsibilities: component densities ``w_j N(x; mu_j, F_j F_j^T)``
    normalized, then summed over the components of each cluster.

    ``x`` is a point ``(d,)`` or a batch ``(m, d)`` in the unwarped space.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != h.dim:
        raise InputError(f"point dimension {X.shape[1]} != hypothesis dimension {h.dim}")
    logp = np.empty((X.shape[0], h.n_components))
    for j in range(h.n_components):
        F = h.cov_factors[j]
        diag = np.diag(F)
        if np.any(diag <= 0):
            raise InputError(f"component {j} has a singular covariance factor")
        r = solve_triangular(F, (X - h.means[j]).T, lower=True)
        with np.errstate(divide="ignore"):
            logp[:, j] = np.log(h.weights[j]) - 0.5 * (r * r).sum(axis=0) - np.log(diag).sum()
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    p /= p.sum(axis=1, keepdims=True)
    out = np.zeros((X.shape[0], h.n_clusters))
    for j, c in enumerate(h.component_labels):
        out[:, c] += p[:, j]
    return out[0] if single else out


def task_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for task ``index`` of the stream rooted at ``seed``."""
    return np.random.default_rng([seed, index])


def sample_stream_task(seed: int, index: int, cfg: PriorConfig) -> SyntheticTask:
    rng = task_rng(seed, index)
    h = sample_hypothesis(rng, cfg)
    n = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
    C = h.n_clusters
    k = int(rng.integers(C, max(C, n // 2) + 1))
    return sample_task(rng, h, n, k)


def make_training_stream(rng: np.random.Generator, cfg: PriorConfig) -> Iterator[SyntheticTask]:
    """Infinite task stream; task ``i`` depends only on the root seed and ``i``."""
    root = int(rng.integers(0, 2**62))
    i = 0
    while True:
        yield sample_stream_task(root, i, cfg)
        i += 1
