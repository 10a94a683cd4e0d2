"""Dense numeric core with a reverse-mode tape.

Tensors wrap numpy arrays. Operations executed inside an active :class:`Tape`
are recorded together with the closures that compute their vector-Jacobian
products; outside a tape they run forward only, which is what inference uses.

All kernels keep the dtype of their inputs, so a model built in float64
yields a float64 graph (used by the finite-difference tests).
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import InputError

DEFAULT_DTYPE = np.float32

_local = threading.local()

# Below this many rows numpy dispatches to gemv / a non-BLAS loop whose
# accumulation order differs from gemm; padding keeps every row of a product
# bit-identical regardless of how many rows are computed together.
_MIN_GEMM_ROWS = 4


class Tensor:
    """A numpy array plus (optionally) an accumulated gradient slot."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Tape:
    """Ordered record of primitive ops, their inputs and VJP closures."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def tune_allocator() -> None:
    """Keep large temporaries on the glibc heap instead of fresh mmap pages.

    Kernels allocate many same-sized multi-megabyte arrays per step; with the
    default mmap threshold each one page-faults anew. No-op off glibc.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    libc.mallopt(m_mmap_threshold, 1 << 30)
    libc.mallopt(m_trim_threshold, 1 << 30)
    libc.mallopt(m_top_pad, 1 << 28)


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append((out, parents, vjp))
    return out


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-stable ``a @ b`` (row i of the result depends only on row i of ``a``)."""
    m = a.shape[-2]
    if m >= _MIN_GEMM_ROWS:
        return a @ b
    padded = np.zeros(a.shape[:-2] + (_MIN_GEMM_ROWS, a.shape[-1]), dtype=a.dtype)
    padded[..., :m, :] = a
    return (padded @ b)[..., :m, :]


def row_sum(a: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Sum over the last axis; einsum is several times faster than ``sum`` for
    short rows and, like gemm above, row-stable."""
    out = np.einsum("...j->...", a)
    return out[..., None] if keepdims else out


def row_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...j,...j->...", a, b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InputError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        ga = gemm(g, np.swapaxes(B, -1, -2)) if a.requires_grad else None
        gb = gemm(np.swapaxes(A, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _emit(gemm(A, B), (a, b), vjp)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with the bias added in place."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise InputError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    X, W = x.data, w.data
    out = gemm(X, W)
    out += b.data

    def vjp(g):
        gx = gemm(g, W.T) if x.requires_grad else None
        gw = gemm(np.ascontiguousarray(X.T), g) if w.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return _emit(out, (x, w, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit(a.data + b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _emit(A * B, (a, b), vjp)


def total(a) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        return (np.full(shape, g, dtype=dtype),)

    return _emit(np.asarray(a.data.sum()), (a,), vjp)


def concat_cols(*parts) -> Tensor:
    """Join tensors along the last axis."""
    parts = tuple(as_tensor(p) for p in parts)
    edges = np.cumsum([0] + [p.shape[-1] for p in parts])

    def vjp(g):
        return tuple(g[..., lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))

    return _emit(np.concatenate([p.data for p in parts], axis=-1), parts, vjp)


def column_block(a, lo: int, hi: int) -> Tensor:
    """Columns ``lo:hi`` of a 2-D tensor."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, lo:hi] = g
        return (out,)

    return _emit(a.data[:, lo:hi], (a,), vjp)


def take_rows(table, idx) -> Tensor:
    """Gather rows ``table[idx]`` (embedding lookup / row selection)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise InputError(f"row index out of range [0, {n_rows})")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.data[idx], (table,), vjp)


def softmax_rows(m, mask=None) -> Tensor:
    """Row-wise softmax; ``mask`` (True = allowed) zeroes excluded entries."""
    m = as_tensor(m)
    x = m.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise InputError(f"softmax mask shape {mask.shape} != {x.shape}")
        if not mask.any(axis=-1).all():
            raise InputError("softmax: fully masked row")
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return _emit(p, (m,), vjp)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise InputError(f"layer_norm: gain/shift must have length {d}")
    X = x.data
    inv_d = X.dtype.type(1.0 / d)
    xc = X - row_sum(X, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(row_dot(xc, xc)[..., None] * inv_d + eps)
    xhat = xc * inv
    G = gain.data

    def vjp(g):
        dxhat = g * G
        dx = inv * (
            dxhat
            - row_sum(dxhat, keepdims=True) * inv_d
            - xhat * (row_dot(dxhat, xhat)[..., None] * inv_d)
        )
        rows = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=rows), g.sum(axis=rows)

    return _emit(xhat * G + shift.data, (x, gain, shift), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    X = x.data
    t = np.tanh(_GELU_C * (X + 0.044715 * (X * X * X)))

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * X * X)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * dt),)

    return _emit(0.5 * X * (1.0 + t), (x,), vjp)


def split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    """``(N, heads * dh)`` -> contiguous ``(heads, N, dh)``."""
    N, dm = a.shape
    return np.ascontiguousarray(a.reshape(N, heads, dm // heads).transpose(1, 0, 2))


def merge_heads(a: np.ndarray) -> np.ndarray:
    h, N, dh = a.shape
    return a.transpose(1, 0, 2).reshape(N, h * dh)


# exp() of a float32 in [-SAFE_LOGIT, SAFE_LOGIT] neither overflows nor underflows
SAFE_LOGIT = 80.0


def attend_block(q_s, k_s, v_s, kc, vc, n_ctx: int):
    """Masked attention for one block of rows, heads leading.

    ``q_s`` is pre-scaled. Every row attends to ``kc``/``vc``; rows from
    ``n_ctx`` on also attend to their own key. Returns the output and the
    context and self weights (needed for the backward pass).

    Scores of a row are bounded by ``|q| * max|k|``. Rows whose bound is
    below SAFE_LOGIT are exponentiated without the usual max shift; only the
    rest pay for the row maximum. The choice is per row, so results do not
    depend on how rows are grouped into blocks.
    """
    p_ctx = gemm(q_s, kc.transpose(0, 2, 1))
    s_self = row_dot(q_s, k_s)
    s_self[:, :n_ctx] = -np.inf
    k_max = np.sqrt(row_dot(kc, kc).max(axis=-1, keepdims=True)) if kc.shape[1] else 0.0
    bound = np.sqrt(row_dot(q_s, q_s)) * np.maximum(k_max, np.sqrt(row_dot(k_s, k_s)))
    shift = np.zeros_like(s_self)
    hot = bound >= SAFE_LOGIT
    if hot.any():
        h, r = np.nonzero(hot)
        ctx_max = p_ctx[h, r].max(axis=-1) if kc.shape[1] else np.full(h.size, -np.inf, s_self.dtype)
        shift[h, r] = np.maximum(ctx_max, s_self[h, r])
        p_ctx -= shift[..., None]
    np.exp(p_ctx, out=p_ctx)
    s_self -= shift
    p_self = np.exp(s_self, out=s_self)
    inv = 1.0 / (row_sum(p_ctx) + p_self)
    p_ctx *= inv[..., None]
    p_self *= inv
    return gemm(p_ctx, vc) + p_self[..., None] * v_s, p_ctx, p_self


def pfn_attention(q, k, v, segments: Sequence[tuple[int, int, int]], heads: int) -> Tensor:
    """Multi-head attention under the context/query mask, per packed segment.

    ``segments`` lists ``(start, n, n_ctx)`` for every task packed into the
    token rows. Inside a segment, rows ``< n_ctx`` are context: they attend to
    all context rows. Remaining rows are queries: they attend to all context
    rows and to themselves only. Queries never see each other, so each query
    row of the output is a function of the context block and that row alone.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    N, dm = q.shape
    if k.shape != (N, dm) or v.shape != (N, dm) or dm % heads:
        raise InputError("pfn_attention: q/k/v shapes disagree or d_model % heads != 0")
    scale = 1.0 / math.sqrt(dm // heads)

    Qs = split_heads(q.data, heads) * q.data.dtype.type(scale)
    K, V = split_heads(k.data, heads), split_heads(v.data, heads)
    out = np.empty_like(Qs)
    saved = []
    for start, n, n_ctx in segments:
        sl = slice(start, start + n)
        k_s, v_s = K[:, sl], V[:, sl]
        out[:, sl], p_ctx, p_self = attend_block(Qs[:, sl], k_s, v_s, k_s[:, :n_ctx], v_s[:, :n_ctx], n_ctx)
        saved.append((sl, n_ctx, p_ctx, p_self))

    def vjp(g):
        G = split_heads(g, heads)
        dQ, dK, dV = np.zeros_like(Qs), np.zeros_like(K), np.zeros_like(V)
        for sl, n_ctx, p_ctx, p_self in saved:
            g_s = G[:, sl]
            q_s, k_s, v_s = Qs[:, sl], K[:, sl], V[:, sl]
            kc, vc = k_s[:, :n_ctx], v_s[:, :n_ctx]
            dp_ctx = gemm(g_s, vc.transpose(0, 2, 1))
            dp_self = row_dot(g_s, v_s)
            dV[:, sl][:, :n_ctx] += gemm(p_ctx.transpose(0, 2, 1), g_s)
            dV[:, sl] += p_self[..., None] * g_s
            inner = row_dot(p_ctx, dp_ctx) + p_self * dp_self
            ds_ctx = p_ctx * (dp_ctx - inner[..., None])
            ds_self = p_self * (dp_self - inner)
            dQ[:, sl] += gemm(ds_ctx, kc) + ds_self[..., None] * k_s
            dK[:, sl][:, :n_ctx] += gemm(ds_ctx.transpose(0, 2, 1), q_s)
            dK[:, sl] += ds_self[..., None] * q_s
        dQ *= dQ.dtype.type(scale)
        return merge_heads(dQ), merge_heads(dK), merge_heads(dV)

    return _emit(merge_heads(out), (q, k, v), vjp)


def masked_log_softmax(logits: np.ndarray, n_classes: np.ndarray) -> np.ndarray:
    """Log-softmax over the first ``n_classes[i]`` columns of each row; -inf elsewhere."""
    cols = np.arange(logits.shape[-1])
    valid = cols[None, :] < np.asarray(n_classes)[:, None]
    x = np.where(valid, logits, -np.inf)
    mx = x.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True))
    return x - lse


def cross_entropy(logits, targets, n_classes) -> Tensor:
    """Mean negative log-likelihood with per-row class truncation."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    n_classes = np.asarray(n_classes, dtype=np.intp)
    R = logits.shape[0]
    if np.any(targets >= n_classes) or np.any(targets < 0):
        raise InputError("cross_entropy: target outside its row's class range")
    logp = masked_log_softmax(logits.data, n_classes)
    nll = -logp[np.arange(R), targets]

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(R), targets] -= 1.0
        return (p * (g / R),)

    return _emit(np.asarray(nll.mean(), dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar ``loss``.

    Returns a map from ``id(leaf)`` to gradient for every leaf tensor with
    ``requires_grad`` that participated in the recorded forward pass.
    """
    if loss.data.size != 1:
        raise InputError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for out, parents, vjp in reversed(tape.records):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {key: g for key, g in grads.items() if key not in produced}


def grad_map(tape: Tape, loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """``backward`` keyed by parameter name; absent parameters get zeros."""
    raw = backward(tape, loss)
    return {
        name: raw.get(id(p), np.zeros_like(p.data)).astype(p.dtype, copy=False)
        for name, p in params.items()
    }
