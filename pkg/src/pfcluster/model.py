"""The prior-fitted transformer: token embedding, masked encoder, cluster head.

Context tokens carry a label embedding, query tokens carry the reserved
"unlabeled" embedding (index ``c_max``). There are no positional encodings;
a dataset is a set.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .errors import (
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ConfigError,
    InputError,
    NumericError,
)

MAGIC = b"PFCCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    d_max: int = 16
    c_max: int = 10
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"ModelConfig.{f.name} must be a positive integer, got {value!r}")
        if self.d_model % self.heads:
            raise ConfigError("ModelConfig.d_model must be divisible by heads")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    D, F = cfg.d_model, cfg.d_ff
    shapes = {
        "x_proj.w": (cfg.d_max, D),
        "x_proj.b": (D,),
        "label_emb": (cfg.c_max + 1, D),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.wq": (D, D), p + "attn.bq": (D,),
            p + "attn.wk": (D, D), p + "attn.bk": (D,),
            p + "attn.wv": (D, D), p + "attn.bv": (D,),
            p + "attn.wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "mlp.w1": (D, F), p + "mlp.b1": (F,),
            p + "mlp.w2": (F, D), p + "mlp.b2": (D,),
        })
    shapes.update({
        "ln_f.g": (D,), "ln_f.b": (D,),
        "head.w": (D, cfg.c_max), "head.b": (cfg.c_max,),
    })
    return shapes


class PfnModel:
    """Configuration plus named weight tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise CheckpointShapeError(f"parameter names disagree with config (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise CheckpointShapeError(f"{name}: shape {params[name].shape} != expected {shape}")
        self.config = config
        self.params = {name: nk.Tensor(arr, requires_grad=True, name=name) for name, arr in params.items()}

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0, dtype=nk.DEFAULT_DTYPE) -> "PfnModel":
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        params = {}
        out_scale = 1.0 / math.sqrt(2 * config.layers)
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            elif name == "label_emb":
                arr = rng.normal(0.0, 1.0, shape)
            else:
                arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
                if leaf in ("wo", "w2"):
                    arr *= out_scale
            params[name] = arr.astype(dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["x_proj.w"].dtype

    def astype(self, dtype) -> "PfnModel":
        return PfnModel(self.config, {k: t.data.astype(dtype) for k, t in self.params.items()})

    def copy(self) -> "PfnModel":
        return PfnModel(self.config, {k: t.data.copy() for k, t in self.params.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


# ------------------------------------------------------------------- masks


@dataclass(frozen=True)
class AttentionMask:
    n_tokens: int
    k: int

    @property
    def allow(self) -> np.ndarray:
        n, k = self.n_tokens, self.k
        allow = np.zeros((n, n), dtype=bool)
        allow[:, :k] = True
        allow[np.arange(n), np.arange(n)] = True
        return allow


def build_mask(n: int, k: int) -> AttentionMask:
    if not 0 <= k < n:
        raise InputError(f"build_mask needs 0 <= k < n (got n={n}, k={k}); k == n leaves no queries")
    return AttentionMask(n, k)


# ------------------------------------------------------------------ forward


def pad_features(X: np.ndarray, d_max: int, dtype) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2:
        raise InputError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if X.shape[1] > d_max:
        raise InputError(f"feature dimension {X.shape[1]} exceeds d_max={d_max}; project first")
    out = np.zeros((X.shape[0], d_max), dtype=dtype)
    out[:, : X.shape[1]] = X
    return out


def embed_tokens(model: PfnModel, X_pad: np.ndarray, label_idx: np.ndarray) -> nk.Tensor:
    """Token rows ``W_x x + b_x + label_emb[label_idx]`` (``c_max`` = unlabeled)."""
    p = model.params
    label_idx = np.asarray(label_idx, dtype=np.intp)
    if label_idx.size and (label_idx.min() < 0 or label_idx.max() > model.config.c_max):
        raise InputError(f"context label outside [0, {model.config.c_max})")
    h = nk.add(nk.matmul(nk.Tensor(X_pad), p["x_proj.w"]), p["x_proj.b"])
    return nk.add(h, nk.take_rows(p["label_emb"], label_idx))


def embed(model: PfnModel, X_std: np.ndarray, context_labels: Sequence[int]) -> nk.Tensor:
    """Embed one task: the first ``len(context_labels)`` rows are context."""
    cfg = model.config
    context_labels = np.asarray(context_labels, dtype=np.intp)
    if context_labels.size and (context_labels.min() < 0 or context_labels.max() >= cfg.c_max):
        raise InputError(f"context label outside [0, {cfg.c_max})")
    X_pad = pad_features(X_std, cfg.d_max, model.dtype)
    idx = np.full(X_pad.shape[0], cfg.c_max, dtype=np.intp)
    idx[: context_labels.size] = context_labels
    return embed_tokens(model, X_pad, idx)


def query_rows(segments: Sequence[tuple[int, int, int]]) -> np.ndarray:
    parts = [np.arange(start + k, start + n) for start, n, k in segments]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)


def _layer(model: PfnModel, i: int, h: nk.Tensor, attend) -> nk.Tensor:
    """One pre-norm block; ``attend(q, k, v)`` supplies the masked attention."""
    p = model.params
    pre = f"layers.{i}."
    a = nk.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
    # one projection for q, k and v
    w = nk.concat_cols(p[pre + "attn.wq"], p[pre + "attn.wk"], p[pre + "attn.wv"])
    b = nk.concat_cols(p[pre + "attn.bq"], p[pre + "attn.bk"], p[pre + "attn.bv"])
    qkv = nk.linear(a, w, b)
    dm = model.config.d_model
    q, k, v = (nk.column_block(qkv, j * dm, (j + 1) * dm) for j in range(3))
    h = nk.add(h, nk.linear(attend(q, k, v), p[pre + "attn.wo"], p[pre + "attn.bo"]))
    a = nk.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
    m = nk.gelu(nk.linear(a, p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
    h = nk.add(h, nk.linear(m, p[pre + "mlp.w2"], p[pre + "mlp.b2"]))
    if not np.isfinite(h.data).all():
        raise NumericError(f"non-finite activation after layer {i}")
    return h


def _head(model: PfnModel, hq: nk.Tensor) -> nk.Tensor:
    p = model.params
    return nk.linear(nk.layer_norm(hq, p["ln_f.g"], p["ln_f.b"]), p["head.w"], p["head.b"])


def forward_packed(model: PfnModel, tokens: nk.Tensor, segments: Sequence[tuple[int, int, int]]) -> nk.Tensor:
    """Encoder over several tasks packed row-wise; returns logits of all query rows."""
    heads = model.config.heads

    def attend(q, k, v):
        return nk.pfn_attention(q, k, v, segments, heads)

    h = tokens
    for i in range(model.config.layers):
        h = _layer(model, i, h, attend)
    return _head(model, nk.take_rows(h, query_rows(segments)))


@dataclass
class ContextCache:
    """Per-layer keys and values of the context rows, heads leading.

    Context rows never attend to queries, so their activations can be
    computed once and shared by every query chunk.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]

    @property
    def k(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0


def encode_context(model: PfnModel, ctx_tokens: nk.Tensor) -> ContextCache:
    heads = model.config.heads
    keys, values = [], []

    def attend(q, k, v):
        keys.append(nk.split_heads(k.data, heads))
        values.append(nk.split_heads(v.data, heads))
        n = q.shape[0]
        return nk.pfn_attention(q, k, v, [(0, n, n)], heads)

    h = ctx_tokens
    for i in range(model.config.layers):
        if h.shape[0]:
            h = _layer(model, i, h, attend)
        else:
            empty = np.zeros((heads, 0, model.config.d_model // heads), dtype=model.dtype)
            keys.append(empty)
            values.append(empty)
    return ContextCache(keys, values)


def forward_queries(model: PfnModel, cache: ContextCache, q_tokens: nk.Tensor) -> nk.Tensor:
    """Query logits against a cached context (inference only, no gradients)."""
    heads = model.config.heads
    scale = q_tokens.dtype.type(1.0 / np.sqrt(model.config.d_model // heads))
    layer = iter(range(model.config.layers))

    def attend(q, k, v):
        i = next(layer)
        out, _, _ = nk.attend_block(nk.split_heads(q.data, heads) * scale, nk.split_heads(k.data, heads),
                                    nk.split_heads(v.data, heads), cache.keys[i], cache.values[i], 0)
        return nk.Tensor(nk.merge_heads(out))

    h = q_tokens
    for i in range(model.config.layers):
        h = _layer(model, i, h, attend)
    return _head(model, h)


def forward(model: PfnModel, tokens: nk.Tensor, mask: AttentionMask) -> nk.Tensor:
    """Logits ``(n - k) x c_max`` for the query rows of a single task."""
    if tokens.shape[0] != mask.n_tokens:
        raise InputError(f"token count {tokens.shape[0]} != mask size {mask.n_tokens}")
    return forward_packed(model, tokens, [(0, mask.n_tokens, mask.k)])


def predict_proba(logits, C: int, c_max: int | None = None) -> np.ndarray:
    """Softmax over the first ``C`` logit columns."""
    logits = logits.data if isinstance(logits, nk.Tensor) else np.asarray(logits)
    if C < 1:
        raise InputError(f"cluster count must be >= 1, got {C}")
    if C > (c_max if c_max is not None else logits.shape[-1]):
        raise InputError(f"cluster count {C} exceeds the model's c_max")
    x = logits[:, :C]
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


# -------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: PfnModel) -> bytes:
    buf = io.BytesIO()
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    for name, t in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: PfnModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


# the checkpoint shipped with the package; ``load_checkpoint("default")`` reads it
DEFAULT_CHECKPOINT = Path(__file__).resolve().parent / "checkpoints" / "default.pfc"


def load_checkpoint(path) -> PfnModel:
    if path == "default":
        path = DEFAULT_CHECKPOINT
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC):
        raise CheckpointTruncatedError("checkpoint shorter than its magic header")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {data[:len(MAGIC)]!r}")
    r = _Reader(data)
    r.pos = len(MAGIC)
    cfg_len = r.u32()
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len)))
    except (ValueError, TypeError) as exc:
        raise CheckpointShapeError(f"unreadable model config: {exc}") from exc
    expected = param_shapes(config)
    params: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if name not in expected:
            raise CheckpointShapeError(f"unexpected tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise CheckpointShapeError(f"{name}: stored shape {tuple(dims)} != config shape {expected[name]}")
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointTruncatedError(f"checkpoint ends before tensors {missing[:3]}...")
    return PfnModel(config, {n: params[n] for n in expected})
