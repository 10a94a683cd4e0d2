"""Datasets: the 2-D toy suite, MNIST IDX files, PCA projection, file formats."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import (
    ConfigError,
    DimensionMismatchError,
    FormatError,
    InputError,
    MagicMismatchError,
    TruncatedFileError,
)

TOY_KINDS = ("circles", "moons", "blobs", "aniso", "varied", "uniform")
TOY_DEFAULT_NOISE = {"circles": 0.05, "moons": 0.05, "blobs": 1.0, "aniso": 1.0, "varied": 1.0, "uniform": 0.0}
TOY_CLUSTERS = {"circles": 2, "moons": 2, "blobs": 3, "aniso": 3, "varied": 3, "uniform": 3}

BLOB_CENTERS = np.array([[0.0, 6.0], [-5.5, -3.0], [5.5, -3.0]])
VARIED_STDS = (1.0, 2.5, 0.5)
ANISO_MATRIX = np.array([[0.6, -0.6], [-0.4, 0.8]])

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MATRIX_MAGIC = b"PFCMAT1"


@dataclass(frozen=True)
class ToySpec:
    kind: str
    n: int = 2000
    noise: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TOY_KINDS:
            raise ConfigError(f"unknown toy dataset {self.kind!r}; expected one of {TOY_KINDS}")
        if self.n < 2:
            raise ConfigError("toy datasets need n >= 2")
        if self.noise is not None and self.noise < 0:
            raise ConfigError("noise must be >= 0")


@dataclass
class Dataset:
    X: np.ndarray
    true_labels: np.ndarray | None = None
    name: str = "data"

    def __post_init__(self):
        self.X = np.asarray(self.X)
        if self.X.ndim != 2:
            raise InputError(f"dataset X must be 2-D, got shape {self.X.shape}")
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
            if self.true_labels.shape != (self.X.shape[0],):
                raise InputError("label count differs from the number of points")

    @property
    def n(self) -> int:
        return self.X.shape[0]


# ------------------------------------------------------------------ toys


def _split(n: int, parts: int) -> np.ndarray:
    counts = np.full(parts, n // parts)
    counts[: n % parts] += 1
    return counts


def _blobs(rng, n, stds):
    counts = _split(n, 3)
    labels = np.repeat(np.arange(3), counts)
    scale = np.repeat(np.asarray(stds, dtype=np.float64), counts)[:, None]
    X = BLOB_CENTERS[labels] + rng.normal(size=(n, 2)) * scale
    return X, labels


def gen_toy(spec: ToySpec) -> Dataset:
    """Generate one panel of the toy comparison suite (rows shuffled)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    noise = TOY_DEFAULT_NOISE[spec.kind] if spec.noise is None else spec.noise
    if spec.kind == "circles":
        counts = _split(n, 2)
        labels = np.repeat([0, 1], counts)
        radius = np.where(labels == 0, 1.0, 0.5)
        theta = rng.uniform(0.0, 2 * np.pi, n)
        X = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
        if noise:
            X = X + rng.normal(scale=noise, size=X.shape)
    elif spec.kind == "moons":
        counts = _split(n, 2)
        labels = np.repeat([0, 1], counts)
        t = rng.uniform(0.0, np.pi, n)
        X = np.where(labels[:, None] == 0,
                     np.column_stack([np.cos(t), np.sin(t)]),
                     np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)]))
        if noise:
            X = X + rng.normal(scale=noise, size=X.shape)
    elif spec.kind == "blobs":
        X, labels = _blobs(rng, n, [noise] * 3)
    elif spec.kind == "aniso":
        X, labels = _blobs(rng, n, [noise] * 3)
        X = X @ ANISO_MATRIX
    elif spec.kind == "varied":
        X, labels = _blobs(rng, n, [noise * s for s in VARIED_STDS])
    else:
        X = rng.uniform(size=(n, 2))
        labels = np.zeros(n, dtype=np.int64)
    order = rng.permutation(n)
    return Dataset(X[order], labels[order], spec.kind)


def toy_suite(n: int = 2000, seed: int = 0) -> list[Dataset]:
    return [gen_toy(ToySpec(kind, n=n, seed=seed)) for kind in TOY_KINDS]


# ------------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_parse(raw: bytes, expected_magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: file shorter than its magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise MagicMismatchError(f"{what}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{what}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    body = raw[head:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise TruncatedFileError(f"{what}: expected {need} data bytes, found {len(body)}")
    return dims, body[:need]


def idx_header(path, expected_magic: int = IDX_IMAGES_MAGIC) -> tuple[int, ...]:
    """Dimensions stored in an IDX header (reads only the header)."""
    with open(path, "rb") as fh:
        start = fh.read(2)
        fh.seek(0)
        if start == b"\x1f\x8b":
            fh = gzip.open(path, "rb")
        head = fh.read(4 + 4 * 4)
    if len(head) < 4:
        raise TruncatedFileError("IDX header truncated")
    magic = struct.unpack(">I", head[:4])[0]
    if magic != expected_magic:
        raise MagicMismatchError(f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(head) < 4 + 4 * ndim:
        raise TruncatedFileError("IDX header truncated")
    return struct.unpack(f">{ndim}I", head[4: 4 + 4 * ndim])


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (the MNIST layout)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Read an MNIST image/label IDX pair (optionally gzipped); pixels scaled to [0, 1]."""
    dims, body = _idx_parse(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    n, rows, cols = dims
    ldims, lbody = _idx_parse(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if ldims[0] != n:
        raise DimensionMismatchError(f"{n} images but {ldims[0]} labels")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(n, rows * cols)
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return Dataset(pixels.astype(np.float32) / 255.0, labels, "mnist")


# ------------------------------------------------------------------- PCA


def pca_project(X, d_out: int = 16, iters: int = 100, tol: float = 1e-7):
    """Top ``d_out`` principal directions by power iteration with deflation.

    Returns the centered projection and the ``d x d_out`` orthonormal basis.
    Each direction is sign-fixed so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if not 1 <= d_out <= min(n, d):
        raise InputError(f"d_out={d_out} must lie in [1, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(n - 1, 1)
    basis, _ = _power_eigs(cov, d_out, iters, tol)
    return Xc @ basis, basis


def _power_eigs(cov: np.ndarray, d_out: int, iters: int, tol: float):
    d = cov.shape[0]
    A = cov.copy()
    start = np.random.default_rng(0).normal(size=(d_out, d))
    vecs, vals = [], []
    for j in range(d_out):
        v = start[j]
        for prev in vecs:  # start orthogonal to found directions
            v = v - (v @ prev) * prev
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = A @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        v = v * np.sign(v[np.argmax(np.abs(v))])
        vecs.append(v)
        vals.append(lam)
        A = A - lam * np.outer(v, v)
    return np.column_stack(vecs), np.asarray(vals)


def pca_eigenvalues(X, d_out: int, iters: int = 100, tol: float = 1e-7) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    return _power_eigs(cov, d_out, iters, tol)[1]


class PCAProjector(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`pca_project`."""

    def __init__(self, n_components=16, iters=100, tol=1e-7):
        self.n_components = n_components
        self.iters = iters
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        _, basis = pca_project(X, self.n_components, self.iters, self.tol)
        self.mean_ = X.mean(axis=0)
        self.components_ = basis.T
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


# -------------------------------------------------------------- subsample


def subsample_indices(n: int, n_sub: int, seed: int, labels=None) -> np.ndarray:
    if not 0 <= n_sub <= n:
        raise InputError(f"cannot draw {n_sub} of {n} points without replacement")
    rng = np.random.default_rng(seed)
    if labels is None:
        return np.sort(rng.choice(n, size=n_sub, replace=False))
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * n_sub / n
    take = np.floor(quota).astype(int)
    # largest remainders first, lower class first on ties
    short = n_sub - take.sum()
    order = np.lexsort((classes, -(quota - take)))
    take[order[:short]] += 1
    picked = [rng.choice(np.flatnonzero(labels == c), size=t, replace=False) for c, t in zip(classes, take)]
    return np.sort(np.concatenate(picked))


def subsample(dataset: Dataset, n_sub: int, seed: int = 0) -> Dataset:
    """Uniform draw without replacement, stratified by label when labels exist."""
    idx = subsample_indices(dataset.n, n_sub, seed, dataset.true_labels)
    labels = None if dataset.true_labels is None else dataset.true_labels[idx]
    return Dataset(dataset.X[idx], labels, dataset.name)


def mnist_protocol(dataset: Dataset, n_sub: int = 2000, d_out: int = 16, seed: int = 0) -> Dataset:
    """Stratified subsample, per-feature standardization, PCA to ``d_out`` dims."""
    from .inference import standardize

    sub = subsample(dataset, n_sub, seed)
    X_std, _ = standardize(sub.X)
    X_proj, _ = pca_project(X_std, d_out)
    return Dataset(X_proj, sub.true_labels, f"{dataset.name}-pca{d_out}")


# ------------------------------------------------------------ file formats


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_csv_matrix(path) -> tuple[np.ndarray, list[str] | None]:
    """Numeric CSV with an optional header row."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = None
    if not all(_is_number(c) for c in rows[0]):
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric value ({exc})") from exc
    if data.ndim != 2 or (header is not None and data.shape[1] != len(header)):
        raise FormatError(f"{path}: ragged rows")
    return data, header


def read_dataset_csv(path) -> Dataset:
    """``f0,...,f{d-1}[,label]``; the label column is recognised by its header."""
    data, header = read_csv_matrix(path)
    if header and header[-1] == "label":
        return Dataset(data[:, :-1], data[:, -1].astype(np.int64), Path(path).stem)
    return Dataset(data, None, Path(path).stem)


def write_dataset_csv(dataset: Dataset, path) -> None:
    d = dataset.X.shape[1]
    header = [f"f{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if dataset.true_labels is None:
            w.writerow(header)
            for row in dataset.X:
                w.writerow([repr(float(v)) for v in row])
        else:
            w.writerow(header + ["label"])
            for row, lab in zip(dataset.X, dataset.true_labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])


def write_matrix(path, X: np.ndarray) -> None:
    """Binary matrix: magic ``PFCMAT1``, rows and cols as little-endian u32, f32 data."""
    X = np.ascontiguousarray(X, dtype="<f4")
    if X.ndim != 2:
        raise InputError("write_matrix needs a 2-D array")
    Path(path).write_bytes(MATRIX_MAGIC + struct.pack("<II", *X.shape) + X.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(MATRIX_MAGIC)] != MATRIX_MAGIC:
        raise MagicMismatchError(f"{path}: not a {MATRIX_MAGIC.decode()} matrix file")
    head = len(MATRIX_MAGIC) + 8
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header truncated")
    rows, cols = struct.unpack("<II", raw[len(MATRIX_MAGIC): head])
    if len(raw) - head != 4 * rows * cols:
        raise TruncatedFileError(f"{path}: expected {rows}x{cols} values")
    return np.frombuffer(raw[head:], dtype="<f4").reshape(rows, cols).astype(np.float64)


def load_points(path) -> Dataset:
    """Load a data file by sniffing: binary matrix, else CSV."""
    with open(path, "rb") as fh:
        start = fh.read(len(MATRIX_MAGIC))
    if start == MATRIX_MAGIC:
        return Dataset(read_matrix(path), None, Path(path).stem)
    return read_dataset_csv(path)
